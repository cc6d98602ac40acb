//! Probability models for dose-toxicity and dose-efficacy.
//!
//! Logistic toxicity `F(x; θ)` and efficacy `p(x; ψ)` curves, the
//! (ρ, η) reparameterization used by the Bayesian Phase I prior, the
//! grid-restricted MTD, conditional efficacy given toxicity, and the
//! global cross-ratio construction of a 2×2 joint law per dose level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used wherever a probability is compared against a target such as
/// `F(λ) ≤ q`, so that a curve built to hit `q` exactly at a dose still
/// qualifies after rounding.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("slope must be positive and finite, got {0}")]
    NonPositiveSlope(f64),
    #[error("{name} = {value} must lie in (0, 1)")]
    ProbabilityOutOfRange { name: &'static str, value: f64 },
    #[error("reparameterization is degenerate when eta equals x_min")]
    DegenerateEwoc,
    #[error("rho = {rho} must lie in (0, q = {q}]")]
    RhoOutOfRange { rho: f64, q: f64 },
    #[error("eta = {eta} outside the dose range [{x_min}, {x_max}]")]
    EtaOutOfRange { eta: f64, x_min: f64, x_max: f64 },
    #[error("dose grid must be strictly increasing with at least two levels")]
    InvalidGrid,
    #[error("dose range requires finite x_min < x_max, got [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("expected {expected} dose levels, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{0} must be nondecreasing and within [0, 1]")]
    NotMonotone(&'static str),
    #[error("cross ratio must be positive and finite, got {0}")]
    InvalidCrossRatio(f64),
    #[error("infeasible (pi, phi, rho): cell {cell} = {value}")]
    InfeasibleCells { cell: &'static str, value: f64 },
    #[error("endpoint conditions need two distinct doses and increasing probabilities")]
    InvalidEndpoints,
}

/// Logistic function evaluated without overflow for large |t|.
#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^t)`.
#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of one outcome under linear predictor `t`.
#[inline]
pub fn bernoulli_loglik(outcome: bool, t: f64) -> f64 {
    if outcome {
        -softplus(-t)
    } else {
        -softplus(t)
    }
}

fn check_open_unit(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(ModelError::ProbabilityOutOfRange { name, value })
    }
}

/// Logistic dose-toxicity curve `F(x) = 1 / (1 + exp(-(θ₁ + θ₂x)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToxicityParams {
    pub theta1: f64,
    pub theta2: f64,
}

impl ToxicityParams {
    pub fn new(theta1: f64, theta2: f64) -> Result<Self, ModelError> {
        let p = Self { theta1, theta2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.theta2 > 0.0 && self.theta2.is_finite() && self.theta1.is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonPositiveSlope(self.theta2))
        }
    }

    #[inline]
    pub fn prob(&self, x: f64) -> f64 {
        logistic(self.theta1 + self.theta2 * x)
    }

    #[inline]
    pub fn mtd(&self, q: f64) -> f64 {
        (logit(q) - self.theta1) / self.theta2
    }
}

/// Toxicity curve parameterized by `ρ = F(x_min)` and the MTD `η`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwocParams {
    pub rho: f64,
    pub eta: f64,
}

impl EwocParams {
    pub fn validate(&self, q: f64, range: DoseRange) -> Result<(), ModelError> {
        if !(self.rho > 0.0 && self.rho <= q) {
            return Err(ModelError::RhoOutOfRange { rho: self.rho, q });
        }
        if !(self.eta >= range.x_min && self.eta <= range.x_max) {
            return Err(ModelError::EtaOutOfRange {
                eta: self.eta,
                x_min: range.x_min,
                x_max: range.x_max,
            });
        }
        Ok(())
    }
}

/// Logistic dose-efficacy curve `p(x) = 1 / (1 + exp(-(ψ₁ + ψ₂x)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficacyParams {
    pub psi1: f64,
    pub psi2: f64,
}

impl EfficacyParams {
    pub fn new(psi1: f64, psi2: f64) -> Result<Self, ModelError> {
        let p = Self { psi1, psi2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.psi2 > 0.0 && self.psi2.is_finite() && self.psi1.is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonPositiveSlope(self.psi2))
        }
    }

    #[inline]
    pub fn prob(&self, x: f64) -> f64 {
        logistic(self.psi1 + self.psi2 * x)
    }

    /// Solves for the curve passing through `(x_a, p_a)` and `(x_b, p_b)`.
    pub fn from_endpoints(x_a: f64, p_a: f64, x_b: f64, p_b: f64) -> Result<Self, ModelError> {
        check_open_unit("p_a", p_a)?;
        check_open_unit("p_b", p_b)?;
        if !(x_b > x_a) || !(p_b > p_a) {
            return Err(ModelError::InvalidEndpoints);
        }
        let psi2 = (logit(p_b) - logit(p_a)) / (x_b - x_a);
        let psi1 = logit(p_a) - x_a * psi2;
        Self::new(psi1, psi2)
    }
}

/// Efficacy conditional on the toxicity outcome of the same patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondEfficacyParams {
    /// Curve for `P(z = 1 | y = 0, x)`.
    pub psi0: EfficacyParams,
    /// Curve for `P(z = 1 | y = 1, x)`.
    pub psi1p: EfficacyParams,
}

impl CondEfficacyParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.psi0.validate()?;
        self.psi1p.validate()
    }

    #[inline]
    pub fn prob_given(&self, x: f64, toxic: bool) -> f64 {
        if toxic {
            self.psi1p.prob(x)
        } else {
            self.psi0.prob(x)
        }
    }

    /// Marginal efficacy at `x` when the toxicity probability there is `tox`.
    pub fn marginal(&self, x: f64, tox: f64) -> f64 {
        (1.0 - tox) * self.psi0.prob(x) + tox * self.psi1p.prob(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseRange {
    pub x_min: f64,
    pub x_max: f64,
}

impl DoseRange {
    pub fn new(x_min: f64, x_max: f64) -> Result<Self, ModelError> {
        let r = Self { x_min, x_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max {
            Ok(())
        } else {
            Err(ModelError::InvalidRange(self.x_min, self.x_max))
        }
    }

    #[inline]
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.x_min, self.x_max)
    }
}

/// Finite ordered set of dose levels `λ₁ < … < λ_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    pub levels: Vec<f64>,
}

impl DoseGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self, ModelError> {
        let g = Self { levels };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.levels.len() >= 2
            && self.levels.iter().all(|x| x.is_finite())
            && self.levels.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidGrid)
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn x_min(&self) -> f64 {
        self.levels[0]
    }

    pub fn x_max(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    pub fn range(&self) -> DoseRange {
        DoseRange {
            x_min: self.x_min(),
            x_max: self.x_max(),
        }
    }

    /// Index of the level equal to `x` (up to 1e-9 relative slack).
    pub fn level_of(&self, x: f64) -> Option<usize> {
        self.levels
            .iter()
            .position(|&l| (l - x).abs() <= 1e-9 * l.abs().max(1.0))
    }
}

/// Where doses may be placed: anywhere in a range, or only on grid levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DoseDomain {
    Range { x_min: f64, x_max: f64 },
    Grid { levels: Vec<f64> },
}

impl DoseDomain {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            DoseDomain::Range { x_min, x_max } => DoseRange::new(*x_min, *x_max).map(|_| ()),
            DoseDomain::Grid { levels } => DoseGrid::new(levels.clone()).map(|_| ()),
        }
    }

    pub fn range(&self) -> DoseRange {
        match self {
            DoseDomain::Range { x_min, x_max } => DoseRange {
                x_min: *x_min,
                x_max: *x_max,
            },
            DoseDomain::Grid { levels } => DoseRange {
                x_min: levels[0],
                x_max: levels[levels.len() - 1],
            },
        }
    }

    pub fn grid(&self) -> Option<DoseGrid> {
        match self {
            DoseDomain::Range { .. } => None,
            DoseDomain::Grid { levels } => Some(DoseGrid {
                levels: levels.clone(),
            }),
        }
    }

    /// Nearest admissible dose to `x`; ties go to the lower level.
    pub fn snap(&self, x: f64) -> f64 {
        match self {
            DoseDomain::Range { x_min, x_max } => x.clamp(*x_min, *x_max),
            DoseDomain::Grid { levels } => levels
                .iter()
                .copied()
                .fold(levels[0], |best, l| if (l - x).abs() < (best - x).abs() { l } else { best }),
        }
    }
}

/// Per-level toxicity and efficacy probabilities with global cross ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoParams {
    pub phi: Vec<f64>,
    pub pi: Vec<f64>,
    pub rho_x: Vec<f64>,
}

impl IsoParams {
    pub fn validate(&self, d: usize) -> Result<(), ModelError> {
        for v in [&self.phi, &self.pi, &self.rho_x] {
            if v.len() != d {
                return Err(ModelError::LengthMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        let monotone_unit =
            |v: &[f64]| v.iter().all(|p| (0.0..=1.0).contains(p)) && v.windows(2).all(|w| w[0] <= w[1]);
        if !monotone_unit(&self.phi) {
            return Err(ModelError::NotMonotone("phi"));
        }
        if !monotone_unit(&self.pi) {
            return Err(ModelError::NotMonotone("pi"));
        }
        if let Some(&r) = self.rho_x.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(ModelError::InvalidCrossRatio(r));
        }
        Ok(())
    }

    pub fn cells(&self, level: usize) -> Result<JointCells, ModelError> {
        dale_cells(self.pi[level], self.phi[level], self.rho_x[level])
    }
}

/// Joint law `Π(y, z)` of toxicity `y` and efficacy `z` at one dose level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointCells {
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
}

impl JointCells {
    #[inline]
    pub fn prob(&self, toxic: bool, efficacious: bool) -> f64 {
        match (toxic, efficacious) {
            (false, false) => self.p00,
            (false, true) => self.p01,
            (true, false) => self.p10,
            (true, true) => self.p11,
        }
    }

    pub fn efficacy_marginal(&self) -> f64 {
        self.p01 + self.p11
    }

    pub fn toxicity_marginal(&self) -> f64 {
        self.p10 + self.p11
    }

    pub fn cross_ratio(&self) -> f64 {
        self.p00 * self.p11 / (self.p10 * self.p01)
    }

    /// `P(z = 1 | y)`; zero when the conditioning event has no mass.
    pub fn efficacy_given(&self, toxic: bool) -> f64 {
        let (num, den) = if toxic {
            (self.p11, self.p10 + self.p11)
        } else {
            (self.p01, self.p00 + self.p01)
        };
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

#[inline]
pub fn tox_prob(x: f64, th: &ToxicityParams) -> f64 {
    th.prob(x)
}

#[inline]
pub fn eff_prob(x: f64, ps: &EfficacyParams) -> f64 {
    ps.prob(x)
}

/// Dose at which the toxicity probability equals `q`.
#[inline]
pub fn mtd_continuous(th: &ToxicityParams, q: f64) -> f64 {
    th.mtd(q)
}

/// Converts `(ρ, η)` to `(θ₁, θ₂)` with `F(x_min) = ρ` and `F(η) = q`.
pub fn ewoc_to_theta(ep: &EwocParams, q: f64, x_min: f64) -> Result<ToxicityParams, ModelError> {
    check_open_unit("q", q)?;
    check_open_unit("rho", ep.rho)?;
    if ep.eta == x_min {
        return Err(ModelError::DegenerateEwoc);
    }
    let theta2 = (logit(q) - logit(ep.rho)) / (ep.eta - x_min);
    let theta1 = logit(ep.rho) - x_min * theta2;
    ToxicityParams::new(theta1, theta2)
}

/// Index of the grid MTD: the highest level with `F(λ) ≤ q`, else the lowest.
pub fn mtd_discrete_index(th: &ToxicityParams, q: f64, grid: &DoseGrid) -> usize {
    grid.levels
        .iter()
        .rposition(|&l| th.prob(l) <= q + PROB_TOL)
        .unwrap_or(0)
}

pub fn mtd_discrete(th: &ToxicityParams, q: f64, grid: &DoseGrid) -> f64 {
    grid.levels[mtd_discrete_index(th, q, grid)]
}

/// Efficacy probability at the MTD under the conditional model, where the
/// toxicity probability at `eta` is `q` by definition.
pub fn eff_prob_at_mtd_dependent(cp: &CondEfficacyParams, eta: f64, q: f64) -> f64 {
    (1.0 - q) * cp.psi0.prob(eta) + q * cp.psi1p.prob(eta)
}

/// Recovers the 2×2 joint law from the efficacy marginal `pi_i`, toxicity
/// marginal `phi_i` and global cross ratio `rho_i`.
pub fn dale_cells(pi_i: f64, phi_i: f64, rho_i: f64) -> Result<JointCells, ModelError> {
    if !(0.0..=1.0).contains(&pi_i) {
        return Err(ModelError::ProbabilityOutOfRange {
            name: "pi",
            value: pi_i,
        });
    }
    if !(0.0..=1.0).contains(&phi_i) {
        return Err(ModelError::ProbabilityOutOfRange {
            name: "phi",
            value: phi_i,
        });
    }
    if !(rho_i > 0.0 && rho_i.is_finite()) {
        return Err(ModelError::InvalidCrossRatio(rho_i));
    }
    // (a - sqrt(a² + b)) / (2(ρ - 1)) rewritten as 2ρπφ / (a + sqrt(a² + b)):
    // the same root, free of the 0/0 at ρ = 1.
    let a = 1.0 + (pi_i + phi_i) * (rho_i - 1.0);
    let b = -4.0 * rho_i * (rho_i - 1.0) * pi_i * phi_i;
    let disc = (a * a + b).max(0.0).sqrt();
    let denom = a + disc;
    let p11 = if denom > 0.0 {
        2.0 * rho_i * pi_i * phi_i / denom
    } else {
        0.0
    };
    let p01 = pi_i - p11;
    let p10 = phi_i - p11;
    let p00 = 1.0 - pi_i - phi_i + p11;
    const NEG_SLACK: f64 = 1e-12;
    for (cell, value) in [("p00", p00), ("p01", p01), ("p10", p10), ("p11", p11)] {
        if value < -NEG_SLACK || !value.is_finite() {
            return Err(ModelError::InfeasibleCells { cell, value });
        }
    }
    Ok(JointCells {
        p00: p00.max(0.0),
        p01: p01.max(0.0),
        p10: p10.max(0.0),
        p11: p11.max(0.0),
    })
}
