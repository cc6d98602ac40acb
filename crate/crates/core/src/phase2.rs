//! Phase II path simulation shared by the operating-characteristics
//! harness and the bootstrap calibration.
//!
//! Doses and toxicity outcomes are generated first, because the dosing rule
//! only looks at toxicity. Efficacy outcomes are filled in afterwards, so a
//! toxicity path can be reused under several efficacy curves.

use serde::{Deserialize, Serialize};

use crate::inference::{Record, TrialData};
use crate::models::DoseDomain;
use crate::phase1::{Estimator, Phase1Result};
use crate::seqtest::{
    estimate_mtd, next_dose, run_analysis, Analysis, AnalysisMode, AnalysisSpec, GroupSchedule,
    MtdEstimate, SeqTestError, Thresholds,
};

/// Whether `η̂` is re-estimated at each interim analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtdPolicy {
    Fixed,
    Updating,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Plan {
    pub spec: AnalysisSpec,
    pub domain: DoseDomain,
    pub q: f64,
    pub schedule: GroupSchedule,
    pub policy: MtdPolicy,
}

/// Doses and toxicities through `τ_K`, and the estimate used at each analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ToxPath {
    pub data: TrialData,
    /// `mtds[k - 1]` is the estimate at analysis `k`.
    pub mtds: Vec<MtdEstimate>,
}

/// The MTD estimate Phase II starts from.
///
/// Parametric analyses take the chosen Phase I estimator, snapped to the
/// domain. Isotonic analyses take the order-restricted estimate from the
/// Phase I toxicity data.
pub fn initial_mtd(
    spec: &AnalysisSpec,
    domain: &DoseDomain,
    q: f64,
    phase1: &Phase1Result,
    estimator: Estimator,
) -> Result<MtdEstimate, SeqTestError> {
    match spec.mode {
        AnalysisMode::Isotonic => estimate_mtd(spec, domain, q, &phase1.data),
        AnalysisMode::Parametric => Ok(MtdEstimate::from_phase1(
            domain,
            phase1.estimates.eta(estimator),
        )),
    }
}

/// Extends Phase I data through `τ_K`. Patient `t` is toxic iff
/// `u_tox[t] < tox(x_t)`.
pub fn simulate_tox_path<F: Fn(f64) -> f64>(
    plan: &Phase2Plan,
    phase1_data: &TrialData,
    initial: MtdEstimate,
    tox: F,
    u_tox: &[f64],
) -> Result<ToxPath, SeqTestError> {
    let s = &plan.schedule;
    if phase1_data.len() != s.m {
        return Err(SeqTestError::InvalidSchedule(format!(
            "Phase I data has {} records, schedule expects {}",
            phase1_data.len(),
            s.m
        )));
    }
    if u_tox.len() < s.max_n() {
        return Err(SeqTestError::InvalidSchedule(format!(
            "{} toxicity uniforms for {} patients",
            u_tox.len(),
            s.max_n()
        )));
    }
    let mut data = phase1_data.clone();
    data.records.reserve(s.max_n() - s.m);
    let mut mtd = initial;
    let mut mtds = Vec::with_capacity(s.k_max());
    for k in 1..=s.k_max() {
        let x = next_dose(&plan.domain, &mtd);
        let p = tox(x);
        for &u in &u_tox[s.tau(k - 1)..s.tau(k)] {
            data.push(Record::new(x, u < p, false));
        }
        if plan.policy == MtdPolicy::Updating {
            mtd = estimate_mtd(&plan.spec, &plan.domain, plan.q, &data)?;
        }
        mtds.push(mtd);
    }
    Ok(ToxPath { data, mtds })
}

/// Sets `z_t = u_eff[t] < eff(x_t, y_t)` for every patient from `from` on.
pub fn fill_efficacy<F: Fn(f64, bool) -> f64>(
    data: &mut TrialData,
    from: usize,
    eff: F,
    u_eff: &[f64],
) {
    for (r, &u) in data.records[from..].iter_mut().zip(&u_eff[from..]) {
        r.z = u < eff(r.x, r.y);
    }
}

/// Interim analyses of a complete path, stopping at the first terminal
/// verdict when `stop_early` is set.
pub fn analyze_path(
    plan: &Phase2Plan,
    data: &TrialData,
    mtds: &[MtdEstimate],
    th: &Thresholds,
    stop_early: bool,
) -> Result<Vec<Analysis>, SeqTestError> {
    let s = &plan.schedule;
    let k_max = s.k_max();
    let mut out = Vec::with_capacity(k_max);
    for (k, tau) in (1..=k_max).zip(s.taus()) {
        let a = run_analysis(&plan.spec, &plan.domain, &data.head(tau), mtds[k - 1], k, k_max, th)?;
        let stop = a.decision.verdict.is_terminal();
        out.push(a);
        if stop && stop_early {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::logistic;
    use crate::seqtest::{MtdSource, Verdict};

    fn plan(policy: MtdPolicy) -> Phase2Plan {
        Phase2Plan {
            spec: AnalysisSpec::parametric(),
            domain: DoseDomain::Range {
                x_min: 140.0,
                x_max: 425.0,
            },
            q: 1.0 / 3.0,
            schedule: GroupSchedule::new(6, vec![4, 4, 2]).unwrap(),
            policy,
        }
    }

    fn phase1() -> TrialData {
        TrialData::new(
            [(140.0, false), (200.0, false), (250.0, true), (250.0, false), (300.0, true), (300.0, false)]
                .iter()
                .map(|&(x, y)| Record::new(x, y, false))
                .collect(),
        )
    }

    fn uniforms(n: usize, shift: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.618_033_988 + shift) % 1.0).collect()
    }

    fn tox(x: f64) -> f64 {
        logistic(-4.0 + 0.014 * x)
    }

    #[test]
    fn fixed_policy_doses_at_initial_estimate() {
        let p = plan(MtdPolicy::Fixed);
        let init = MtdEstimate::from_phase1(&p.domain, 262.5);
        let path = simulate_tox_path(&p, &phase1(), init, tox, &uniforms(16, 0.1)).unwrap();
        assert_eq!(path.data.len(), 16);
        assert!(path.data.records[6..].iter().all(|r| r.x == 262.5));
        assert!(path.mtds.iter().all(|m| m.source == MtdSource::Phase1));
    }

    #[test]
    fn updating_policy_doses_at_previous_estimate() {
        let p = plan(MtdPolicy::Updating);
        let init = MtdEstimate::from_phase1(&p.domain, 262.5);
        let path = simulate_tox_path(&p, &phase1(), init, tox, &uniforms(16, 0.3)).unwrap();
        let taus = p.schedule.taus();
        assert!(path.data.records[6..10].iter().all(|r| r.x == 262.5));
        for k in 1..taus.len() {
            let expected = estimate_mtd(&p.spec, &p.domain, p.q, &path.data.head(taus[k - 1])).unwrap();
            assert_eq!(path.mtds[k - 1], expected);
            let group = &path.data.records[taus[k - 1]..taus[k]];
            assert!(group.iter().all(|r| r.x == expected.eta));
        }
    }

    #[test]
    fn efficacy_fill_leaves_phase1_alone() {
        let p = plan(MtdPolicy::Fixed);
        let mut d = phase1();
        d.records[0].z = true;
        let init = MtdEstimate::from_phase1(&p.domain, 250.0);
        let mut path = simulate_tox_path(&p, &d, init, tox, &uniforms(16, 0.0)).unwrap();
        fill_efficacy(&mut path.data, 6, |_, _| 1.0, &uniforms(16, 0.5));
        assert!(path.data.records[0].z);
        assert!(!path.data.records[1].z);
        assert!(path.data.records[6..].iter().all(|r| r.z));
    }

    #[test]
    fn open_bounds_run_to_the_last_analysis() {
        let p = plan(MtdPolicy::Updating);
        let init = MtdEstimate::from_phase1(&p.domain, 250.0);
        let mut path = simulate_tox_path(&p, &phase1(), init, tox, &uniforms(16, 0.2)).unwrap();
        fill_efficacy(&mut path.data, 6, |x, _| logistic(-3.0 + 0.01 * x), &uniforms(16, 0.7));
        let th = Thresholds::fixed_sample(0.5, 0.1, 0.25);
        let a = analyze_path(&p, &path.data, &path.mtds, &th, true).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a[..2].iter().all(|x| x.decision.verdict == Verdict::Continue));
        assert!(a[2].decision.verdict.is_terminal());
        assert_eq!(a.iter().map(|x| x.n).collect::<Vec<_>>(), vec![10, 14, 16]);
    }

    #[test]
    fn short_streams_are_rejected() {
        let p = plan(MtdPolicy::Fixed);
        let init = MtdEstimate::from_phase1(&p.domain, 250.0);
        assert!(simulate_tox_path(&p, &phase1(), init, tox, &uniforms(15, 0.0)).is_err());
        assert!(simulate_tox_path(&p, &phase1().head(5), init, tox, &uniforms(16, 0.0)).is_err());
    }
}
