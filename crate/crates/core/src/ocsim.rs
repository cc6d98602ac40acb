//! Monte Carlo operating characteristics of Trad and New designs.
//!
//! Each replication runs Phase I once. Every arm and every efficacy truth
//! point then reuses that Phase I and the same per-patient uniforms, so
//! differences between arms come from the designs alone.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::inference::{Record, TrialData};
use crate::models::{DoseDomain, ModelError};
use crate::phase1::{run_phase1, Estimator, Phase1Config, Phase1Error, Phase1Result};
use crate::phase2::{
    analyze_path, fill_efficacy, initial_mtd, simulate_tox_path, MtdPolicy, Phase2Plan, ToxPath,
};
use crate::rng::{stream, Channel, PatientUniforms};
use crate::seqtest::{
    next_dose, AnalysisSpec, GroupSchedule, MtdEstimate, SeqTestError, Thresholds, Verdict,
};
use crate::simon::SimonDesign;
use crate::truth::{EffTruthSpec, ToxTruthSpec, Truth};

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum OcError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("{failures} of {n_reps} replications failed; first failure: {first}")]
    TooManyFailures {
        failures: usize,
        n_reps: usize,
        first: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Phase1(#[from] Phase1Error),
    #[error(transparent)]
    SeqTest(#[from] SeqTestError),
    #[error("report serialization failed: {0}")]
    Serialize(String),
}

fn default_delta() -> f64 {
    crate::inference::DEFAULT_DELTA
}
fn default_estimator() -> Estimator {
    Estimator::Mle
}
fn default_analysis() -> AnalysisSpec {
    AnalysisSpec::parametric()
}
fn yes() -> bool {
    true
}

/// Phase II arm run group-sequentially at the Phase I estimate or at the
/// running estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialArm {
    pub groups: Vec<usize>,
    pub thresholds: Thresholds,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_analysis")]
    pub analysis: AnalysisSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewArm {
    #[serde(flatten)]
    pub seq: SequentialArm,
    /// With `false` the arm doses every group at the Phase I estimate.
    #[serde(default = "yes")]
    pub update_mtd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ArmKind {
    /// Simon two-stage test at the dose chosen by Phase I.
    TradSimon {
        design: SimonDesign,
        #[serde(default = "default_estimator")]
        estimator: Estimator,
        /// Decides how the Phase I estimate is formed; isotonic takes the
        /// order-restricted grid estimate.
        #[serde(default = "default_analysis")]
        analysis: AnalysisSpec,
    },
    TradGroupSequential(SequentialArm),
    New(NewArm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: ArmKind,
}

/// One efficacy truth; toxicity is shared by the whole scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint {
    pub label: String,
    pub eff: EffTruthSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Marginal efficacy at the recommended dose.
    PRec,
    Eff,
    Od,
    Rmse,
    Reject,
    En,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::PRec,
        Metric::Eff,
        Metric::Od,
        Metric::Rmse,
        Metric::Reject,
        Metric::En,
    ];

    fn all() -> Vec<Metric> {
        Self::ALL.to_vec()
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::PRec => "p_rec",
            Metric::Eff => "eff",
            Metric::Od => "od",
            Metric::Rmse => "rmse",
            Metric::Reject => "reject",
            Metric::En => "en",
        }
    }

    fn header(self) -> &'static str {
        match self {
            Metric::PRec => "p(eta_rec)",
            Metric::Eff => "Eff",
            Metric::Od => "OD",
            Metric::Rmse => "RMSE",
            Metric::Reject => "P(rej H0)",
            Metric::En => "EN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub n_reps: usize,
    pub seed: u64,
    pub domain: DoseDomain,
    pub phase1: Phase1Config,
    pub tox: ToxTruthSpec,
    pub points: Vec<TruthPoint>,
    pub p0: f64,
    pub arms: Vec<ArmConfig>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "Metric::all")]
    pub metrics: Vec<Metric>,
}

impl ScenarioConfig {
    pub fn from_json(s: &str) -> Result<Self, OcError> {
        serde_json::from_str(s).map_err(|e| OcError::InvalidConfig(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<(), OcError> {
        self.prepare().map(|_| ())
    }

    fn prepare(&self) -> Result<Prepared, OcError> {
        let bad = |s: String| Err(OcError::InvalidConfig(s));
        if self.n_reps == 0 {
            return bad("n_reps must be positive".into());
        }
        if self.points.is_empty() {
            return bad("at least one truth point is required".into());
        }
        if self.arms.is_empty() {
            return bad("at least one arm is required".into());
        }
        if self.metrics.is_empty() {
            return bad("metric set is empty".into());
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return bad("p0 must lie in (0, 1)".into());
        }
        for (i, a) in self.arms.iter().enumerate() {
            if self.arms[..i].iter().any(|b| b.name == a.name) {
                return bad(format!("duplicate arm name {:?}", a.name));
            }
        }
        self.phase1.validate(&self.domain)?;
        let q = self.phase1.q;
        let truths = self
            .points
            .iter()
            .map(|p| Truth::resolve(&self.tox, &p.eff, q, &self.domain))
            .collect::<Result<Vec<_>, _>>()?;
        let m = self.phase1.m;
        let mut arms = Vec::with_capacity(self.arms.len());
        for a in &self.arms {
            let prepared = match &a.kind {
                ArmKind::TradSimon {
                    design,
                    estimator,
                    analysis,
                } => {
                    analysis.validate(&self.domain)?;
                    if design.n1 == 0 || design.r1 > design.r || design.r1 >= design.n1 || design.r >= design.n() {
                        return bad(format!("arm {:?}: invalid Simon design {design}", a.name));
                    }
                    PreparedArm::Simon {
                        design: *design,
                        estimator: *estimator,
                        analysis: analysis.clone(),
                    }
                }
                ArmKind::TradGroupSequential(s) => self.sequential(&a.name, s, MtdPolicy::Fixed, false)?,
                ArmKind::New(n) => {
                    let policy = if n.update_mtd {
                        MtdPolicy::Updating
                    } else {
                        MtdPolicy::Fixed
                    };
                    self.sequential(&a.name, &n.seq, policy, true)?
                }
            };
            arms.push(prepared);
        }
        let max_n = arms
            .iter()
            .map(|a| match a {
                PreparedArm::Simon { design, .. } => m + design.n() as usize,
                PreparedArm::Sequential { plan, .. } => plan.schedule.max_n(),
            })
            .max()
            .unwrap_or(m);
        Ok(Prepared {
            truths,
            arms,
            max_n,
        })
    }

    fn sequential(
        &self,
        name: &str,
        s: &SequentialArm,
        policy: MtdPolicy,
        report_final: bool,
    ) -> Result<PreparedArm, OcError> {
        s.analysis.validate(&self.domain)?;
        s.thresholds.validate()?;
        if (s.thresholds.p0 - self.p0).abs() > 1e-12 {
            return Err(OcError::InvalidConfig(format!(
                "arm {name:?}: thresholds.p0 {} differs from scenario p0 {}",
                s.thresholds.p0, self.p0
            )));
        }
        let schedule = GroupSchedule::new(self.phase1.m, s.groups.clone())?;
        Ok(PreparedArm::Sequential {
            plan: Phase2Plan {
                spec: s.analysis.clone(),
                domain: self.domain.clone(),
                q: self.phase1.q,
                schedule,
                policy,
            },
            thresholds: s.thresholds.clone(),
            estimator: s.estimator,
            report_final,
        })
    }
}

struct Prepared {
    truths: Vec<Truth>,
    arms: Vec<PreparedArm>,
    max_n: usize,
}

enum PreparedArm {
    Simon {
        design: SimonDesign,
        estimator: Estimator,
        analysis: AnalysisSpec,
    },
    Sequential {
        plan: Phase2Plan,
        thresholds: Thresholds,
        estimator: Estimator,
        /// New reports the last running estimate, Trad the Phase I one.
        report_final: bool,
    },
}

/// Outcome of one completed trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub rejected: bool,
    pub n: usize,
    pub eff: f64,
    pub od: f64,
    pub eta_rec: f64,
    pub p_rec: f64,
}

/// Per-patient metrics of a terminal path: response rate and the share of
/// patients dosed strictly above the true MTD, over everyone enrolled.
pub fn metric_accumulators(
    records: &[Record],
    rejected: bool,
    eta_true: f64,
    eta_rec: f64,
    truth: &Truth,
) -> RepMetrics {
    let n = records.len();
    let nf = n.max(1) as f64;
    RepMetrics {
        rejected,
        n,
        eff: records.iter().filter(|r| r.z).count() as f64 / nf,
        od: records.iter().filter(|r| r.x > eta_true).count() as f64 / nf,
        eta_rec,
        p_rec: truth.eff_marginal(eta_rec),
    }
}

fn tox_fn(truth: &Truth) -> impl Fn(f64) -> f64 + '_ {
    move |x| truth.tox_prob(x)
}

/// All arms at all truth points for replication `rep`, indexed
/// `[point][arm]`.
fn run_rep(cfg: &ScenarioConfig, prep: &Prepared, rep: u64) -> Result<Vec<Vec<RepMetrics>>, OcError> {
    let u = PatientUniforms::draw(cfg.seed, rep, prep.max_n);
    let mut design_rng = stream(cfg.seed, rep, Channel::Design);
    // Toxicity is common to all points, so Phase I doses and toxicities are
    // too; efficacy outcomes are regenerated per point below.
    let ph1 = run_phase1(&cfg.phase1, &cfg.domain, &prep.truths[0], &u, &mut design_rng, cfg.delta)?;
    let q = cfg.phase1.q;
    let tox = tox_fn(&prep.truths[0]);
    let mut out = vec![Vec::with_capacity(prep.arms.len()); prep.truths.len()];
    for arm in &prep.arms {
        match arm {
            PreparedArm::Simon {
                design,
                estimator,
                analysis,
            } => {
                let init = initial_mtd(analysis, &cfg.domain, q, &ph1, *estimator)?;
                let path = simon_tox_path(&ph1, &cfg.domain, &init, design.n() as usize, &tox, &u.tox);
                for (i, truth) in prep.truths.iter().enumerate() {
                    out[i].push(run_simon(&path, cfg.phase1.m, design, &init, truth, &u.eff));
                }
            }
            PreparedArm::Sequential {
                plan,
                thresholds,
                estimator,
                report_final,
            } => {
                let init = initial_mtd(&plan.spec, &cfg.domain, q, &ph1, *estimator)?;
                let path = simulate_tox_path(plan, &ph1.data, init, &tox, &u.tox)?;
                for (i, truth) in prep.truths.iter().enumerate() {
                    out[i].push(run_sequential(plan, &path, thresholds, &init, *report_final, truth, &u.eff)?);
                }
            }
        }
    }
    Ok(out)
}

fn simon_tox_path<F: Fn(f64) -> f64>(
    ph1: &Phase1Result,
    domain: &DoseDomain,
    init: &MtdEstimate,
    n: usize,
    tox: F,
    u_tox: &[f64],
) -> TrialData {
    let m = ph1.data.len();
    let x = next_dose(domain, init);
    let p = tox(x);
    let mut data = ph1.data.clone();
    for &u in &u_tox[m..m + n] {
        data.push(Record::new(x, u < p, false));
    }
    data
}

fn run_simon(
    path: &TrialData,
    m: usize,
    design: &SimonDesign,
    init: &MtdEstimate,
    truth: &Truth,
    u_eff: &[f64],
) -> RepMetrics {
    let mut data = path.clone();
    fill_efficacy(&mut data, 0, |x, y| truth.eff_given(x, y), u_eff);
    let (n1, n2) = (design.n1 as usize, design.n2 as usize);
    let responses = |r: &[Record]| r.iter().filter(|r| r.z).count() as u32;
    let stage1 = responses(&data.records[m..m + n1]);
    let (n, rejected) = if stage1 <= design.r1 {
        (m + n1, false)
    } else {
        let total = stage1 + responses(&data.records[m + n1..m + n1 + n2]);
        (m + n1 + n2, total > design.r)
    };
    metric_accumulators(&data.records[..n], rejected, truth.eta, init.eta, truth)
}

fn run_sequential(
    plan: &Phase2Plan,
    path: &ToxPath,
    th: &Thresholds,
    init: &MtdEstimate,
    report_final: bool,
    truth: &Truth,
    u_eff: &[f64],
) -> Result<RepMetrics, OcError> {
    let mut data = path.data.clone();
    fill_efficacy(&mut data, 0, |x, y| truth.eff_given(x, y), u_eff);
    let analyses = analyze_path(plan, &data, &path.mtds, th, true)?;
    let last = analyses.last().expect("schedule has at least one analysis");
    let eta_rec = if report_final { last.mtd.eta } else { init.eta };
    Ok(metric_accumulators(
        &data.records[..last.n],
        last.decision.verdict == Verdict::RejectH0,
        truth.eta,
        eta_rec,
        truth,
    ))
}

/// A Monte Carlo mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    fn mean(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            se: (var / n).sqrt(),
        }
    }

    fn proportion(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            value: p,
            se: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }

    /// Square root of a mean of squares; SE by the delta method.
    fn root_mean(sq: &[f64]) -> Self {
        let ms = Self::mean(sq);
        let value = ms.value.sqrt();
        Self {
            value,
            se: if value > 0.0 { ms.se / (2.0 * value) } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Spread {
    fn of(v: &[f64]) -> Self {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let q = |p: f64| {
            let h = p * (n - 1) as f64;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            s[lo] + (h - lo as f64) * (s[hi] - s[lo])
        };
        let e = Estimate::mean(v);
        Self {
            mean: e.value,
            sd: e.se * (n as f64).sqrt(),
            min: s[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: s[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub point: String,
    pub arm: String,
    pub p_rec: Estimate,
    pub eff: Estimate,
    pub od: Estimate,
    pub rmse: Estimate,
    pub reject: Estimate,
    pub en: Estimate,
    pub eta_rec: Spread,
}

impl Cell {
    pub fn metric(&self, m: Metric) -> Estimate {
        match m {
            Metric::PRec => self.p_rec,
            Metric::Eff => self.eff,
            Metric::Od => self.od,
            Metric::Rmse => self.rmse,
            Metric::Reject => self.reject,
            Metric::En => self.en,
        }
    }

    fn of(point: &str, arm: &str, reps: &[RepMetrics], eta_true: f64) -> Self {
        let col = |f: fn(&RepMetrics) -> f64| reps.iter().map(f).collect::<Vec<_>>();
        let eta = col(|r| r.eta_rec);
        let sq: Vec<f64> = eta.iter().map(|e| (e - eta_true).powi(2)).collect();
        Self {
            point: point.into(),
            arm: arm.into(),
            p_rec: Estimate::mean(&col(|r| r.p_rec)),
            eff: Estimate::mean(&col(|r| r.eff)),
            od: Estimate::mean(&col(|r| r.od)),
            rmse: Estimate::root_mean(&sq),
            reject: Estimate::proportion(reps.iter().filter(|r| r.rejected).count(), reps.len()),
            en: Estimate::mean(&col(|r| r.n as f64)),
            eta_rec: Spread::of(&eta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointInfo {
    pub label: String,
    pub eta: f64,
    pub eff_at_mtd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcReport {
    pub name: String,
    pub seed: u64,
    pub n_reps: usize,
    /// Replications that contributed to the metrics.
    pub completed: usize,
    pub failures: usize,
    pub config_hash: String,
    pub metrics: Vec<Metric>,
    pub arms: Vec<String>,
    pub points: Vec<PointInfo>,
    /// Point-major, arms in configuration order.
    pub cells: Vec<Cell>,
}

impl OcReport {
    pub fn cell(&self, point: &str, arm: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.point == point && c.arm == arm)
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<OcReport, OcError> {
    let prep = cfg.prepare()?;
    let results: Vec<Result<Vec<Vec<RepMetrics>>, OcError>> = (0..cfg.n_reps as u64)
        .into_par_iter()
        .map(|rep| run_rep(cfg, &prep, rep))
        .collect();
    let mut failures = 0;
    let mut first = None;
    let mut ok = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failures += 1;
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if failures as f64 > MAX_FAILURE_RATE * cfg.n_reps as f64 || ok.is_empty() {
        return Err(OcError::TooManyFailures {
            failures,
            n_reps: cfg.n_reps,
            first: first.unwrap_or_default(),
        });
    }
    let mut cells = Vec::with_capacity(cfg.points.len() * cfg.arms.len());
    for (i, (p, truth)) in cfg.points.iter().zip(&prep.truths).enumerate() {
        for (j, a) in cfg.arms.iter().enumerate() {
            let reps: Vec<RepMetrics> = ok.iter().map(|r| r[i][j]).collect();
            cells.push(Cell::of(&p.label, &a.name, &reps, truth.eta));
        }
    }
    Ok(OcReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        n_reps: cfg.n_reps,
        completed: ok.len(),
        failures,
        config_hash: cfg.hash(),
        metrics: cfg.metrics.clone(),
        arms: cfg.arms.iter().map(|a| a.name.clone()).collect(),
        points: cfg
            .points
            .iter()
            .zip(&prep.truths)
            .map(|(p, t)| PointInfo {
                label: p.label.clone(),
                eta: t.eta,
                eff_at_mtd: t.eff_at_mtd,
            })
            .collect(),
        cells,
    })
}

/// Per-replication outcomes for `reps`, indexed `[rep][point][arm]`.
/// Any failed replication is an error.
pub fn replication_metrics(
    cfg: &ScenarioConfig,
    reps: std::ops::Range<u64>,
) -> Result<Vec<Vec<Vec<RepMetrics>>>, OcError> {
    let prep = cfg.prepare()?;
    reps.into_par_iter().map(|rep| run_rep(cfg, &prep, rep)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "table" => Ok(Self::Table),
            other => Err(format!("unknown format {other:?}; expected json, csv or table")),
        }
    }
}

pub fn emit_report(report: &OcReport, format: ReportFormat) -> Result<Vec<u8>, OcError> {
    let ser = |e: &dyn std::fmt::Display| OcError::Serialize(e.to_string());
    match format {
        ReportFormat::Json => serde_json::to_vec_pretty(report).map_err(|e| ser(&e)),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["arm", "point", "metric", "value", "se"]).map_err(|e| ser(&e))?;
            for arm in &report.arms {
                for p in &report.points {
                    let c = report.cell(&p.label, arm).expect("cell per arm and point");
                    for &m in &report.metrics {
                        let e = c.metric(m);
                        w.write_record([arm, &p.label, m.name(), &e.value.to_string(), &e.se.to_string()])
                            .map_err(|e| ser(&e))?;
                    }
                }
            }
            w.into_inner().map_err(|e| ser(&e))
        }
        ReportFormat::Table => Ok(table(report).into_bytes()),
    }
}

/// One row per truth point and arm, one column per metric.
fn table(report: &OcReport) -> String {
    let fmt = |m: Metric, e: Estimate| match m {
        Metric::Rmse | Metric::En => format!("{:.1} ({:.1})", e.value, e.se),
        _ => format!("{:.3} ({:.3})", e.value, e.se),
    };
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("p(eta)".to_string())
        .chain(std::iter::once("Design".to_string()))
        .chain(report.metrics.iter().map(|m| m.header().to_string()))
        .collect()];
    for p in &report.points {
        for arm in &report.arms {
            let c = report.cell(&p.label, arm).expect("cell per arm and point");
            let mut row = vec![p.label.clone(), arm.clone()];
            row.extend(report.metrics.iter().map(|&m| fmt(m, c.metric(m))));
            rows.push(row);
        }
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}: {} replications ({} failed), seed {}, config {}",
        report.name,
        report.completed,
        report.failures,
        report.seed,
        &report.config_hash[..12.min(report.config_hash.len())]
    );
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (s, w))| if j < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EfficacyParams;
    use crate::truth::EffCurve;

    fn truth() -> Truth {
        Truth::resolve(
            &ToxTruthSpec::Ewoc { rho: 0.1, eta: 250.0 },
            &EffTruthSpec::Endpoints {
                at_mtd: 0.3,
                at_xmax: 0.9,
            },
            1.0 / 3.0,
            &DoseDomain::Range {
                x_min: 140.0,
                x_max: 425.0,
            },
        )
        .unwrap()
    }

    fn small(n_reps: usize) -> ScenarioConfig {
        let th = Thresholds::new(3.0, 3.5, 0.7, 0.1, 0.25);
        ScenarioConfig {
            name: "small".into(),
            description: None,
            n_reps,
            seed: 7,
            domain: DoseDomain::Range {
                x_min: 140.0,
                x_max: 425.0,
            },
            phase1: Phase1Config {
                n_rho: 41,
                n_eta: 41,
                ..Phase1Config::ewoc(12)
            },
            tox: ToxTruthSpec::Ewoc { rho: 0.1, eta: 250.0 },
            points: [0.05, 0.5]
                .iter()
                .map(|&p| TruthPoint {
                    label: format!("{p}"),
                    eff: EffTruthSpec::Endpoints {
                        at_mtd: p,
                        at_xmax: 0.9,
                    },
                })
                .collect(),
            p0: 0.1,
            arms: vec![
                ArmConfig {
                    name: "Trad".into(),
                    kind: ArmKind::TradSimon {
                        design: SimonDesign {
                            n1: 10,
                            n2: 10,
                            r1: 1,
                            r: 4,
                        },
                        estimator: Estimator::Mle,
                        analysis: AnalysisSpec::parametric(),
                    },
                },
                ArmConfig {
                    name: "New".into(),
                    kind: ArmKind::New(NewArm {
                        seq: SequentialArm {
                            groups: vec![8, 8, 4],
                            thresholds: th,
                            estimator: Estimator::Mle,
                            analysis: AnalysisSpec::parametric(),
                        },
                        update_mtd: true,
                    }),
                },
            ],
            delta: default_delta(),
            metrics: Metric::all(),
        }
    }

    #[test]
    fn three_patient_overdose_count() {
        let t = truth();
        let recs = [
            Record::new(240.0, false, true),
            Record::new(260.0, false, false),
            Record::new(250.0, true, true),
        ];
        let m = metric_accumulators(&recs, false, 250.0, 250.0, &t);
        assert_eq!(m.od, 1.0 / 3.0);
        assert_eq!(m.eff, 2.0 / 3.0);
        assert_eq!(m.n, 3);
    }

    #[test]
    fn trivial_paths() {
        let t = truth();
        let low = [Record::new(200.0, false, false), Record::new(250.0, false, false)];
        assert_eq!(metric_accumulators(&low, false, 250.0, 250.0, &t).od, 0.0);
        let one = [Record::new(300.0, false, true)];
        assert_eq!(metric_accumulators(&one, false, 250.0, 250.0, &t).eff, 1.0);
        let m = metric_accumulators(&one, false, 250.0, 300.0, &t);
        let EffCurve::Logistic(ps) = t.eff else { unreachable!() };
        assert_eq!(m.p_rec, EfficacyParams::prob(&ps, 300.0));
    }

    #[test]
    fn no_efficacy_never_rejects() {
        let mut cfg = small(40);
        cfg.domain = DoseDomain::Grid {
            levels: vec![140.0, 200.0, 250.0, 300.0, 350.0, 425.0],
        };
        cfg.phase1 = Phase1Config {
            n_rho: 31,
            n_eta: 31,
            ..Phase1Config::uniform_grid(12)
        };
        cfg.points = vec![TruthPoint {
            label: "zero".into(),
            eff: EffTruthSpec::Levels {
                pi: vec![0.0; 6],
                rho_x: None,
            },
        }];
        let r = run_scenario(&cfg).unwrap();
        for c in &r.cells {
            assert_eq!(c.reject.value, 0.0, "{}", c.arm);
            assert_eq!(c.eff.value, 0.0);
        }
    }

    #[test]
    fn report_formats() {
        let r = run_scenario(&small(30)).unwrap();
        let json = emit_report(&r, ReportFormat::Json).unwrap();
        let back: OcReport = serde_json::from_slice(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(emit_report(&back, ReportFormat::Json).unwrap(), json);

        let csv = String::from_utf8(emit_report(&r, ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 2 * 6);

        let table = String::from_utf8(emit_report(&r, ReportFormat::Table).unwrap()).unwrap();
        let body: Vec<&str> = table.lines().skip(3).collect();
        assert_eq!(body.len(), 4);
        assert!(body[0].starts_with("0.05") && body[0].contains("Trad"));
        assert!(body[1].contains("New"));
        let header = table.lines().nth(1).unwrap();
        let pos: Vec<usize> = Metric::ALL.iter().map(|m| header.find(m.header()).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sample_size_bounded_by_schedule() {
        let r = run_scenario(&small(60)).unwrap();
        for c in r.cells.iter().filter(|c| c.arm == "New") {
            assert!(c.en.value <= 32.0 + 1e-12);
            assert!(c.eta_rec.max <= 425.0 && c.eta_rec.min >= 140.0);
        }
        for c in &r.cells {
            for m in [c.reject, c.eff, c.od, c.p_rec] {
                assert!((0.0..=1.0).contains(&m.value));
            }
        }
    }

    #[test]
    fn open_bounds_use_every_patient() {
        let mut cfg = small(20);
        let ArmKind::New(n) = &mut cfg.arms[1].kind else { unreachable!() };
        n.seq.thresholds.b = f64::INFINITY;
        n.seq.thresholds.b_tilde = f64::INFINITY;
        let r = run_scenario(&cfg).unwrap();
        for c in r.cells.iter().filter(|c| c.arm == "New") {
            assert_eq!(c.en.value, 32.0);
            assert_eq!(c.en.se, 0.0);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(10);
        cfg.p0 = 0.2;
        assert!(matches!(cfg.validate(), Err(OcError::InvalidConfig(_))));
        let mut cfg = small(10);
        cfg.arms[1].name = "Trad".into();
        assert!(cfg.validate().is_err());
        let cfg = small(10);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&json).unwrap(), cfg);
        assert_ne!(small(10).hash(), small(11).hash());
    }
}
