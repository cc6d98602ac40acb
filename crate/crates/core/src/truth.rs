//! Generating models for simulated patients.

use serde::{Deserialize, Serialize};

use crate::models::{
    dale_cells, ewoc_to_theta, mtd_discrete_index, CondEfficacyParams, DoseDomain, DoseGrid,
    EfficacyParams, EwocParams, ModelError, ToxicityParams, PROB_TOL,
};

/// Toxicity truth as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ToxTruthSpec {
    /// Logistic curve with `F(x_min) = rho` and MTD `eta`.
    Ewoc { rho: f64, eta: f64 },
    Theta { theta1: f64, theta2: f64 },
    /// Per-level probabilities on a grid domain.
    Levels { phi: Vec<f64> },
}

/// Efficacy truth as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EffTruthSpec {
    Params { psi1: f64, psi2: f64 },
    /// Logistic curve through `at_mtd` at the true MTD and `at_xmax` at the
    /// top of the dose range.
    Endpoints { at_mtd: f64, at_xmax: f64 },
    /// Efficacy conditional on the same patient's toxicity outcome.
    Conditional {
        psi0: EfficacyParams,
        psi1p: EfficacyParams,
    },
    /// Per-level probabilities, optionally with global cross ratios.
    Levels {
        pi: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_x: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ToxCurve {
    Logistic(ToxicityParams),
    Levels { grid: DoseGrid, phi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EffCurve {
    Logistic(EfficacyParams),
    Conditional(CondEfficacyParams),
    Levels {
        grid: DoseGrid,
        pi: Vec<f64>,
        rho_x: Option<Vec<f64>>,
    },
}

/// A fully resolved truth: curves plus the true MTD and efficacy there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub tox: ToxCurve,
    pub eff: EffCurve,
    /// True MTD; on a grid domain this is the grid-restricted MTD.
    pub eta: f64,
    pub eff_at_mtd: f64,
}

fn level(grid: &DoseGrid, x: f64) -> usize {
    grid.level_of(x)
        .unwrap_or_else(|| panic!("dose {x} is not a level of the truth grid"))
}

impl Truth {
    pub fn resolve(
        tox: &ToxTruthSpec,
        eff: &EffTruthSpec,
        q: f64,
        domain: &DoseDomain,
    ) -> Result<Self, ModelError> {
        domain.validate()?;
        let range = domain.range();
        let grid = domain.grid();
        let tox = match tox {
            ToxTruthSpec::Ewoc { rho, eta } => {
                let ep = EwocParams { rho: *rho, eta: *eta };
                ep.validate(q, range)?;
                ToxCurve::Logistic(ewoc_to_theta(&ep, q, range.x_min)?)
            }
            ToxTruthSpec::Theta { theta1, theta2 } => {
                ToxCurve::Logistic(ToxicityParams::new(*theta1, *theta2)?)
            }
            ToxTruthSpec::Levels { phi } => {
                let g = grid.clone().ok_or(ModelError::InvalidGrid)?;
                check_levels(phi, g.len(), "phi")?;
                ToxCurve::Levels { grid: g, phi: phi.clone() }
            }
        };
        let eta = match (&tox, &grid) {
            (ToxCurve::Logistic(th), None) => th.mtd(q),
            (ToxCurve::Logistic(th), Some(g)) => g.levels[mtd_discrete_index(th, q, g)],
            (ToxCurve::Levels { grid: g, phi }, _) => {
                g.levels[phi.iter().rposition(|&p| p <= q + PROB_TOL).unwrap_or(0)]
            }
        };
        let eff = match eff {
            EffTruthSpec::Params { psi1, psi2 } => EffCurve::Logistic(EfficacyParams::new(*psi1, *psi2)?),
            EffTruthSpec::Endpoints { at_mtd, at_xmax } => EffCurve::Logistic(
                EfficacyParams::from_endpoints(eta, *at_mtd, range.x_max, *at_xmax)?,
            ),
            EffTruthSpec::Conditional { psi0, psi1p } => {
                let cp = CondEfficacyParams {
                    psi0: *psi0,
                    psi1p: *psi1p,
                };
                cp.validate()?;
                EffCurve::Conditional(cp)
            }
            EffTruthSpec::Levels { pi, rho_x } => {
                let g = grid.clone().ok_or(ModelError::InvalidGrid)?;
                check_levels(pi, g.len(), "pi")?;
                if let Some(r) = rho_x {
                    if r.len() != g.len() {
                        return Err(ModelError::LengthMismatch {
                            expected: g.len(),
                            got: r.len(),
                        });
                    }
                    if let Some(&bad) = r.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                        return Err(ModelError::InvalidCrossRatio(bad));
                    }
                }
                EffCurve::Levels {
                    grid: g,
                    pi: pi.clone(),
                    rho_x: rho_x.clone(),
                }
            }
        };
        let mut truth = Truth {
            tox,
            eff,
            eta,
            eff_at_mtd: 0.0,
        };
        if let Some(g) = &grid {
            for &l in &g.levels {
                truth.check_joint(l)?;
            }
        }
        truth.eff_at_mtd = truth.eff_marginal(eta);
        Ok(truth)
    }

    fn check_joint(&self, x: f64) -> Result<(), ModelError> {
        if let EffCurve::Levels {
            grid,
            pi,
            rho_x: Some(r),
        } = &self.eff
        {
            let i = level(grid, x);
            dale_cells(pi[i], self.tox_prob(x), r[i])?;
        }
        Ok(())
    }

    pub fn tox_prob(&self, x: f64) -> f64 {
        match &self.tox {
            ToxCurve::Logistic(th) => th.prob(x),
            ToxCurve::Levels { grid, phi } => phi[level(grid, x)],
        }
    }

    /// `P(z = 1 | y, x)`.
    pub fn eff_given(&self, x: f64, toxic: bool) -> f64 {
        match &self.eff {
            EffCurve::Logistic(ps) => ps.prob(x),
            EffCurve::Conditional(cp) => cp.prob_given(x, toxic),
            EffCurve::Levels { grid, pi, rho_x } => {
                let i = level(grid, x);
                match rho_x {
                    None => pi[i],
                    Some(r) => dale_cells(pi[i], self.tox_prob(x), r[i])
                        .map(|c| c.efficacy_given(toxic))
                        .unwrap_or(pi[i]),
                }
            }
        }
    }

    pub fn eff_marginal(&self, x: f64) -> f64 {
        match &self.eff {
            EffCurve::Logistic(ps) => ps.prob(x),
            EffCurve::Conditional(cp) => cp.marginal(x, self.tox_prob(x)),
            EffCurve::Levels { grid, pi, .. } => pi[level(grid, x)],
        }
    }

    /// Toxicity then efficacy, each by inversion of its own uniform.
    #[inline]
    pub fn outcome(&self, x: f64, u_tox: f64, u_eff: f64) -> (bool, bool) {
        let y = u_tox < self.tox_prob(x);
        let z = u_eff < self.eff_given(x, y);
        (y, z)
    }
}

fn check_levels(v: &[f64], d: usize, name: &'static str) -> Result<(), ModelError> {
    if v.len() != d {
        return Err(ModelError::LengthMismatch {
            expected: d,
            got: v.len(),
        });
    }
    if !(v.iter().all(|p| (0.0..=1.0).contains(p)) && v.windows(2).all(|w| w[0] <= w[1])) {
        return Err(ModelError::NotMonotone(name));
    }
    Ok(())
}
