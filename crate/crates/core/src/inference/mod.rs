//! Maximum-likelihood machinery for the logistic and isotonic models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{DoseGrid, EfficacyParams, ToxicityParams};

pub mod dependent;
pub mod isotonic;
pub mod logistic;

pub use dependent::{dependent_iso_mle, dependent_iso_pinned, dependent_loglik, DependentFit};
pub use isotonic::{
    binomial_loglik, clamp_isotonic, constrained_isotonic_mle, iso_mtd, iso_mtd_observed,
    isotonic_loglik, pava, pava_isotonic_mle, pinned_isotonic,
};
pub use logistic::{
    constrained_logistic_mle, constrained_sup, logistic_mle, logistic_sup, FittedCurve, SupFit,
};

/// Lower bound on fitted slopes unless configured otherwise.
pub const DEFAULT_DELTA: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("no observations")]
    Empty,
    #[error("maximum likelihood estimate does not exist: {0}")]
    NonexistentMle(&'static str),
    #[error("dose {0} is not on the grid")]
    OffGrid(f64),
    #[error("probability {0} must lie in (0, 1)")]
    InvalidProbability(f64),
    #[error("level index {index} out of range for {levels} levels")]
    LevelOutOfRange { index: usize, levels: usize },
}

/// One patient: dose, toxicity `y` and efficacy `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: f64,
    pub y: bool,
    pub z: bool,
}

impl Record {
    pub fn new(x: f64, y: bool, z: bool) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn outcome(&self, which: Outcome) -> bool {
        match which {
            Outcome::Toxicity => self.y,
            Outcome::Efficacy => self.z,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialData {
    pub records: Vec<Record>,
}

impl TrialData {
    pub fn new(records: Vec<Record>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn doses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.x).collect()
    }

    pub fn outcomes(&self, which: Outcome) -> Vec<bool> {
        self.records.iter().map(|r| r.outcome(which)).collect()
    }

    /// The first `n` records.
    pub fn head(&self, n: usize) -> TrialData {
        TrialData {
            records: self.records[..n.min(self.records.len())].to_vec(),
        }
    }

    /// Records with `|x - center| <= radius`.
    pub fn window(&self, center: f64, radius: f64) -> TrialData {
        TrialData {
            records: self
                .records
                .iter()
                .copied()
                .filter(|r| (r.x - center).abs() <= radius)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Toxicity,
    Efficacy,
}

/// Which half-line a boundary constraint keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `π(i*) ≤ p`
    AtMost,
    /// `π(i*) ≥ p`
    AtLeast,
}

impl Side {
    pub fn satisfied(self, value: f64, p: f64) -> bool {
        match self {
            Side::AtMost => value <= p,
            Side::AtLeast => value >= p,
        }
    }
}

/// Sufficient statistics at one dose level. `joint[y][z]` counts patients
/// with toxicity `y` and efficacy `z`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub n: u32,
    pub tox: u32,
    pub eff: u32,
    pub joint: [[u32; 2]; 2],
}

impl LevelCounts {
    pub fn add(&mut self, y: bool, z: bool) {
        self.n += 1;
        self.tox += y as u32;
        self.eff += z as u32;
        self.joint[y as usize][z as usize] += 1;
    }

    pub fn successes(&self, which: Outcome) -> u32 {
        match which {
            Outcome::Toxicity => self.tox,
            Outcome::Efficacy => self.eff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseCounts {
    pub levels: Vec<LevelCounts>,
}

impl DoseCounts {
    pub fn empty(d: usize) -> Self {
        Self {
            levels: vec![LevelCounts::default(); d],
        }
    }

    pub fn from_data(data: &TrialData, grid: &DoseGrid) -> Result<Self, InferenceError> {
        let mut c = Self::empty(grid.len());
        for r in &data.records {
            let i = grid.level_of(r.x).ok_or(InferenceError::OffGrid(r.x))?;
            c.levels[i].add(r.y, r.z);
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn total(&self) -> u32 {
        self.levels.iter().map(|l| l.n).sum()
    }

    pub fn add(&mut self, level: usize, y: bool, z: bool) {
        self.levels[level].add(y, z);
    }

    /// Successes and trials per level as floats, for PAVA.
    pub fn rates(&self, which: Outcome) -> (Vec<f64>, Vec<f64>) {
        let s = self
            .levels
            .iter()
            .map(|l| l.successes(which) as f64)
            .collect();
        let n = self.levels.iter().map(|l| l.n as f64).collect();
        (s, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActiveConstraint {
    /// Slope held at its lower bound.
    SlopeLowerBound { delta: f64 },
    /// Curve pinned to probability `p` at dose `x`.
    Boundary { x: f64, p: f64 },
}

/// Fitted logistic curve `logistic(intercept + slope·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    pub intercept: f64,
    pub slope: f64,
    pub loglik: f64,
    pub converged: bool,
    pub active_constraints: Vec<ActiveConstraint>,
}

impl MleReport {
    pub fn toxicity(&self) -> ToxicityParams {
        ToxicityParams {
            theta1: self.intercept,
            theta2: self.slope,
        }
    }

    pub fn efficacy(&self) -> EfficacyParams {
        EfficacyParams {
            psi1: self.intercept,
            psi2: self.slope,
        }
    }

    pub fn prob(&self, x: f64) -> f64 {
        crate::models::logistic(self.intercept + self.slope * x)
    }

    pub fn slope_at_bound(&self) -> bool {
        self.active_constraints
            .iter()
            .any(|c| matches!(c, ActiveConstraint::SlopeLowerBound { .. }))
    }
}
