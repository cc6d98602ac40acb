//! Live trial conduct as an event-sourced state machine.
//!
//! Commands validate against the current [`TrialState`] and return the
//! events they would append; [`apply`] folds events into state and never
//! computes anything itself. Dosing and analyses call the same functions
//! the simulator uses, so a live trial fed the outcomes of a simulated path
//! makes the same decisions.

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{
    logistic_sup, pava_isotonic_mle, DoseCounts, FittedCurve, InferenceError, Outcome, Record,
    TrialData,
};
use crate::models::DoseDomain;
use crate::phase1::{close_out, ewoc_dose_in, Estimator, Phase1Config, Phase1Design, Phase1Error, Phase1Estimates};
use crate::phase2::{initial_mtd, MtdPolicy};
use crate::rng::{stream, Channel};
use crate::seqtest::{
    estimate_mtd, next_dose, run_analysis, Analysis, AnalysisMode, AnalysisSpec, GroupSchedule,
    InterimDecision, MtdEstimate, SeqTestError, Thresholds, Verdict,
};

pub mod store;

pub use store::{JsonlStore, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConductorError {
    #[error("invalid configuration: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    InvalidConfig(Vec<FieldError>),
    #[error("expected patient {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("patient {0} has not been enrolled")]
    NotEnrolled(usize),
    #[error("no patient can be enrolled until outstanding outcomes are recorded")]
    EnrollmentClosed,
    #[error("trial has terminated")]
    AlreadyTerminated,
    #[error("version conflict: request is based on version {expected}, trial is at {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("amendment rejected: {0}")]
    InvalidAmendment(String),
    #[error("analysis failed: {0}")]
    Analysis(String),
}

impl From<SeqTestError> for ConductorError {
    fn from(e: SeqTestError) -> Self {
        Self::Analysis(e.to_string())
    }
}
impl From<Phase1Error> for ConductorError {
    fn from(e: Phase1Error) -> Self {
        Self::Analysis(e.to_string())
    }
}
impl From<InferenceError> for ConductorError {
    fn from(e: InferenceError) -> Self {
        Self::Analysis(e.to_string())
    }
}

fn default_policy() -> MtdPolicy {
    MtdPolicy::Updating
}
fn default_estimator() -> Estimator {
    Estimator::Mle
}
fn default_delta() -> f64 {
    crate::inference::DEFAULT_DELTA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub analysis: AnalysisSpec,
    pub domain: DoseDomain,
    pub phase1: Phase1Config,
    /// Phase II group sizes.
    pub groups: Vec<usize>,
    /// Calibrated bounds; `b = b_tilde = inf` gives a fixed-sample test.
    #[serde(default)]
    pub thresholds: Option<Thresholds>,
    #[serde(default = "default_policy")]
    pub policy: MtdPolicy,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Stream for uniform-grid Phase I allocation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<(), ConductorError> {
        let mut errs = Vec::new();
        if let Err(e) = self.domain.validate() {
            errs.push(FieldError::new("domain", e.to_string()));
        } else {
            if let Err(e) = self.phase1.validate(&self.domain) {
                errs.push(FieldError::new("phase1", e.to_string()));
            }
            if let Err(e) = self.analysis.validate(&self.domain) {
                errs.push(FieldError::new("analysis", e.to_string()));
            }
        }
        if let Err(e) = GroupSchedule::new(self.phase1.m, self.groups.clone()) {
            errs.push(FieldError::new("groups", e.to_string()));
        }
        match &self.thresholds {
            None => errs.push(FieldError::new(
                "thresholds",
                "calibrated thresholds are required; use b = b_tilde = inf for a fixed-sample test",
            )),
            Some(t) => {
                if let Err(e) = t.validate() {
                    errs.push(FieldError::new("thresholds", e.to_string()));
                }
            }
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            errs.push(FieldError::new("delta", "must be positive"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConductorError::InvalidConfig(errs))
        }
    }

    pub fn schedule(&self) -> GroupSchedule {
        GroupSchedule {
            m: self.phase1.m,
            group_sizes: self.groups.clone(),
        }
    }

    fn thresholds(&self) -> &Thresholds {
        self.thresholds.as_ref().expect("validated config has thresholds")
    }

    fn q(&self) -> f64 {
        self.phase1.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PhaseI,
    PhaseII,
    Terminated,
}

/// Analyses recorded in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "stage")]
pub enum AnalysisRecord {
    Phase1Closeout {
        estimates: Phase1Estimates,
        initial: MtdEstimate,
    },
    Interim(Analysis),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "target")]
pub enum AmendmentChange {
    Outcome {
        patient: usize,
        y: bool,
        z: bool,
        previous_y: bool,
        previous_z: bool,
    },
    Thresholds {
        previous: Option<Thresholds>,
        thresholds: Thresholds,
    },
}

/// An analysis re-run on amended data. The original decision stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryRecomputation {
    /// 0 for the Phase I close-out.
    pub k: usize,
    pub original: AnalysisRecord,
    pub recomputed: AnalysisRecord,
    pub verdict_changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EventKind {
    Created {
        trial_id: String,
        config: TrialConfig,
        first_dose: f64,
    },
    Enroll {
        patient: usize,
        dose: f64,
    },
    Outcome {
        patient: usize,
        y: bool,
        z: bool,
        /// Version the submission was based on, for duplicate detection.
        submitted_version: u64,
        /// Next Phase I dose, when the outcome changes it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        next_dose: Option<f64>,
    },
    InterimAnalysis {
        k: usize,
        analysis: AnalysisRecord,
    },
    Decision {
        k: usize,
        verdict: Verdict,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        next_dose: Option<f64>,
    },
    Amendment {
        change: AmendmentChange,
        reason: String,
        advisory: Vec<AdvisoryRecomputation>,
        /// Refreshed Phase I dose when no patient is awaiting an outcome.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        next_dose: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// Trial version once the command that produced this event is applied.
    pub version: u64,
    pub at: DateTime<Utc>,
    pub actor: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub k: usize,
    pub verdict: Verdict,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    pub trial_id: String,
    pub config: TrialConfig,
    /// Completed patients.
    pub data: TrialData,
    /// Dose of every enrolled patient.
    pub doses: Vec<f64>,
    pub submitted_versions: Vec<u64>,
    pub phase: Phase,
    /// Group in progress during Phase II, 0 during Phase I.
    pub current_k: usize,
    pub recommendation: Option<f64>,
    pub phase1: Option<Phase1Estimates>,
    pub initial_mtd: Option<MtdEstimate>,
    pub mtd: Option<MtdEstimate>,
    pub analyses: Vec<Analysis>,
    pub verdicts: Vec<VerdictRecord>,
    pub advisories: Vec<AdvisoryRecomputation>,
    pub version: u64,
    pub n_events: u64,
}

impl TrialState {
    pub fn terminal_verdict(&self) -> Option<VerdictRecord> {
        self.verdicts.iter().copied().find(|v| v.verdict.is_terminal())
    }

    pub fn enrolled(&self) -> usize {
        self.doses.len()
    }

    pub fn completed(&self) -> usize {
        self.data.len()
    }

    /// Patients who may be enrolled before more outcomes are needed.
    pub fn enrollment_limit(&self) -> usize {
        match self.phase {
            Phase::Terminated => self.doses.len(),
            // Each Phase I dose depends on every earlier outcome.
            Phase::PhaseI => self.data.len() + 1,
            Phase::PhaseII => self.config.schedule().tau(self.current_k),
        }
    }
}

/// Context stamped on every event a command produces.
#[derive(Debug, Clone)]
pub struct Command {
    pub actor: String,
    pub at: DateTime<Utc>,
}

impl Command {
    pub fn new(actor: impl Into<String>, at: DateTime<Utc>) -> Self {
        Self {
            actor: actor.into(),
            at,
        }
    }

    pub fn now(actor: impl Into<String>) -> Self {
        Self::new(actor, Utc::now())
    }
}

struct Emitter<'a> {
    cmd: &'a Command,
    seq: u64,
    version: u64,
    events: Vec<Event>,
}

impl<'a> Emitter<'a> {
    fn new(cmd: &'a Command, state: Option<&TrialState>) -> Self {
        Self {
            cmd,
            seq: state.map_or(0, |s| s.n_events),
            version: state.map_or(0, |s| s.version) + 1,
            events: Vec::new(),
        }
    }

    fn push(&mut self, kind: EventKind) {
        self.events.push(Event {
            seq: self.seq,
            version: self.version,
            at: self.cmd.at,
            actor: self.cmd.actor.clone(),
            kind,
        });
        self.seq += 1;
    }
}

fn phase1_dose(cfg: &TrialConfig, data: &TrialData) -> Result<f64, ConductorError> {
    match cfg.phase1.design {
        Phase1Design::Ewoc => {
            let mut post = cfg.phase1.prior(&cfg.domain)?;
            post.update_all(data)?;
            Ok(ewoc_dose_in(&cfg.domain, &post, cfg.phase1.omega))
        }
        Phase1Design::UniformGrid => {
            let DoseDomain::Grid { levels } = &cfg.domain else {
                unreachable!("validated config");
            };
            let mut rng = stream(cfg.seed, cfg.stream, Channel::Design);
            let mut pick = 0;
            for _ in 0..=data.len() {
                pick = rng.random_range(0..levels.len());
            }
            Ok(levels[pick])
        }
    }
}

/// Folds one event into the state. `Created` must come first.
pub fn apply(state: Option<TrialState>, event: &Event) -> TrialState {
    let mut s = match (&event.kind, state) {
        (
            EventKind::Created {
                trial_id,
                config,
                first_dose,
            },
            None,
        ) => TrialState {
            trial_id: trial_id.clone(),
            config: config.clone(),
            data: TrialData::default(),
            doses: Vec::new(),
            submitted_versions: Vec::new(),
            phase: Phase::PhaseI,
            current_k: 0,
            recommendation: Some(*first_dose),
            phase1: None,
            initial_mtd: None,
            mtd: None,
            analyses: Vec::new(),
            verdicts: Vec::new(),
            advisories: Vec::new(),
            version: 0,
            n_events: 0,
        },
        (EventKind::Created { .. }, Some(_)) => panic!("Created event on an existing trial"),
        (_, None) => panic!("event log must start with Created"),
        (_, Some(s)) => s,
    };
    match &event.kind {
        EventKind::Created { .. } => {}
        EventKind::Enroll { dose, .. } => s.doses.push(*dose),
        EventKind::Outcome {
            patient,
            y,
            z,
            submitted_version,
            next_dose,
        } => {
            s.data.push(Record::new(s.doses[*patient], *y, *z));
            s.submitted_versions.push(*submitted_version);
            if next_dose.is_some() {
                s.recommendation = *next_dose;
            }
        }
        EventKind::InterimAnalysis { analysis, .. } => match analysis {
            AnalysisRecord::Phase1Closeout { estimates, initial } => {
                s.phase1 = Some(estimates.clone());
                s.initial_mtd = Some(*initial);
                s.mtd = Some(*initial);
                s.phase = Phase::PhaseII;
                s.current_k = 1;
            }
            AnalysisRecord::Interim(a) => {
                s.mtd = Some(a.mtd);
                s.analyses.push(a.clone());
            }
        },
        EventKind::Decision { k, verdict, next_dose } => {
            s.verdicts.push(VerdictRecord {
                k: *k,
                verdict: *verdict,
                seq: event.seq,
            });
            if verdict.is_terminal() {
                s.phase = Phase::Terminated;
                s.recommendation = None;
            } else {
                s.recommendation = *next_dose;
                if *k >= 1 {
                    s.current_k = k + 1;
                }
            }
        }
        EventKind::Amendment {
            change,
            advisory,
            next_dose,
            ..
        } => {
            if next_dose.is_some() {
                s.recommendation = *next_dose;
            }
            match change {
                AmendmentChange::Outcome { patient, y, z, .. } => {
                    let r = &mut s.data.records[*patient];
                    r.y = *y;
                    r.z = *z;
                }
                AmendmentChange::Thresholds { thresholds, .. } => {
                    s.config.thresholds = Some(thresholds.clone());
                }
            }
            s.advisories.extend(advisory.iter().cloned());
        }
    }
    s.version = event.version;
    s.n_events = event.seq + 1;
    s
}

/// Rebuilds a trial from its full event log.
pub fn replay(events: &[Event]) -> Option<TrialState> {
    events.iter().fold(None, |s, e| Some(apply(s, e)))
}

fn apply_all(state: TrialState, events: &[Event]) -> TrialState {
    events.iter().fold(state, |s, e| apply(Some(s), e))
}

/// Result of a command: the new state and the events that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub state: TrialState,
    pub events: Vec<Event>,
}

pub fn create_trial(trial_id: &str, config: TrialConfig, cmd: &Command) -> Result<Applied, ConductorError> {
    config.validate()?;
    let first_dose = phase1_dose(&config, &TrialData::default())?;
    let mut em = Emitter::new(cmd, None);
    em.push(EventKind::Created {
        trial_id: trial_id.into(),
        config,
        first_dose,
    });
    let state = replay(&em.events).expect("one event");
    Ok(Applied {
        state,
        events: em.events,
    })
}

fn check_version(state: &TrialState, expected: u64) -> Result<(), ConductorError> {
    if expected != state.version {
        return Err(ConductorError::VersionConflict {
            expected,
            actual: state.version,
        });
    }
    Ok(())
}

/// Enrolls the next patient at the current recommendation.
pub fn enroll(state: &TrialState, expected_version: u64, cmd: &Command) -> Result<Applied, ConductorError> {
    if state.phase == Phase::Terminated {
        return Err(ConductorError::AlreadyTerminated);
    }
    check_version(state, expected_version)?;
    if state.enrolled() >= state.enrollment_limit() {
        return Err(ConductorError::EnrollmentClosed);
    }
    let dose = state.recommendation.expect("open trial has a recommendation");
    let mut em = Emitter::new(cmd, Some(state));
    em.push(EventKind::Enroll {
        patient: state.enrolled(),
        dose,
    });
    Ok(Applied {
        state: apply_all(state.clone(), &em.events),
        events: em.events,
    })
}

fn closeout(cfg: &TrialConfig, data: &TrialData) -> Result<AnalysisRecord, ConductorError> {
    let ph1 = close_out(&cfg.phase1, &cfg.domain, data.clone(), cfg.delta)?;
    let initial = initial_mtd(&cfg.analysis, &cfg.domain, cfg.q(), &ph1, cfg.estimator)?;
    Ok(AnalysisRecord::Phase1Closeout {
        estimates: ph1.estimates,
        initial,
    })
}

/// Analysis `k` on `data` (which must hold exactly `τ_k` records).
fn interim(
    cfg: &TrialConfig,
    data: &TrialData,
    initial: MtdEstimate,
    k: usize,
    th: &Thresholds,
) -> Result<Analysis, ConductorError> {
    let mtd = match cfg.policy {
        MtdPolicy::Updating => estimate_mtd(&cfg.analysis, &cfg.domain, cfg.q(), data)?,
        MtdPolicy::Fixed => initial,
    };
    Ok(run_analysis(
        &cfg.analysis,
        &cfg.domain,
        data,
        mtd,
        k,
        cfg.groups.len(),
        th,
    )?)
}

/// Records patient `patient`'s outcome. Re-sending an already applied
/// submission (same patient, values and base version) is a no-op.
pub fn record_outcome(
    state: &TrialState,
    patient: usize,
    y: bool,
    z: bool,
    expected_version: u64,
    cmd: &Command,
) -> Result<Applied, ConductorError> {
    if patient < state.completed() {
        let r = state.data.records[patient];
        if state.submitted_versions[patient] == expected_version && r.y == y && r.z == z {
            return Ok(Applied {
                state: state.clone(),
                events: Vec::new(),
            });
        }
        return Err(ConductorError::OutOfOrder {
            expected: state.completed(),
            got: patient,
        });
    }
    if state.phase == Phase::Terminated {
        return Err(ConductorError::AlreadyTerminated);
    }
    check_version(state, expected_version)?;
    if patient != state.completed() {
        return Err(ConductorError::OutOfOrder {
            expected: state.completed(),
            got: patient,
        });
    }
    if patient >= state.enrolled() {
        return Err(ConductorError::NotEnrolled(patient));
    }
    let cfg = &state.config;
    let mut data = state.data.clone();
    data.push(Record::new(state.doses[patient], y, z));
    let n = data.len();
    let mut em = Emitter::new(cmd, Some(state));
    match state.phase {
        Phase::PhaseI if n < cfg.phase1.m => {
            let next = phase1_dose(cfg, &data)?;
            em.push(EventKind::Outcome {
                patient,
                y,
                z,
                submitted_version: expected_version,
                next_dose: Some(next),
            });
        }
        Phase::PhaseI => {
            em.push(EventKind::Outcome {
                patient,
                y,
                z,
                submitted_version: expected_version,
                next_dose: None,
            });
            let rec = closeout(cfg, &data)?;
            let AnalysisRecord::Phase1Closeout { initial, .. } = &rec else {
                unreachable!()
            };
            let next = next_dose(&cfg.domain, initial);
            em.push(EventKind::InterimAnalysis { k: 0, analysis: rec });
            em.push(EventKind::Decision {
                k: 0,
                verdict: Verdict::Continue,
                next_dose: Some(next),
            });
        }
        Phase::PhaseII => {
            em.push(EventKind::Outcome {
                patient,
                y,
                z,
                submitted_version: expected_version,
                next_dose: None,
            });
            let k = state.current_k;
            if n == cfg.schedule().tau(k) {
                let initial = state.initial_mtd.expect("Phase II has an initial MTD");
                let a = interim(cfg, &data, initial, k, cfg.thresholds())?;
                let verdict = a.decision.verdict;
                let next = (!verdict.is_terminal()).then(|| next_dose(&cfg.domain, &a.mtd));
                em.push(EventKind::InterimAnalysis {
                    k,
                    analysis: AnalysisRecord::Interim(a),
                });
                em.push(EventKind::Decision {
                    k,
                    verdict,
                    next_dose: next,
                });
            }
        }
        Phase::Terminated => unreachable!("checked above"),
    }
    Ok(Applied {
        state: apply_all(state.clone(), &em.events),
        events: em.events,
    })
}

fn record_verdict(r: &AnalysisRecord) -> Verdict {
    match r {
        AnalysisRecord::Phase1Closeout { .. } => Verdict::Continue,
        AnalysisRecord::Interim(a) => a.decision.verdict,
    }
}

/// Re-runs every analysis already performed on `data`, starting from the
/// first one whose data include patient `from`.
fn recompute(state: &TrialState, data: &TrialData, from: usize) -> Result<Vec<AdvisoryRecomputation>, ConductorError> {
    let cfg = &state.config;
    let mut out = Vec::new();
    let Some(original_phase1) = &state.phase1 else {
        return Ok(out);
    };
    let m = cfg.phase1.m;
    let original_initial = state.initial_mtd.expect("closed Phase I has an initial MTD");
    let recomputed = closeout(cfg, &data.head(m))?;
    let AnalysisRecord::Phase1Closeout { initial, .. } = &recomputed else {
        unreachable!()
    };
    let initial = *initial;
    if from < m {
        out.push(AdvisoryRecomputation {
            k: 0,
            original: AnalysisRecord::Phase1Closeout {
                estimates: original_phase1.clone(),
                initial: original_initial,
            },
            recomputed,
            verdict_changed: false,
        });
    }
    let schedule = cfg.schedule();
    for a in &state.analyses {
        let k = a.decision.k;
        if schedule.tau(k) <= from {
            continue;
        }
        let th = cfg.thresholds();
        let re = interim(cfg, &data.head(schedule.tau(k)), initial, k, th)?;
        let original = AnalysisRecord::Interim(a.clone());
        let recomputed = AnalysisRecord::Interim(re);
        out.push(AdvisoryRecomputation {
            k,
            verdict_changed: record_verdict(&original) != record_verdict(&recomputed),
            original,
            recomputed,
        });
    }
    Ok(out)
}

/// Corrects a recorded outcome. Decisions already taken are kept; every
/// affected analysis is re-run and logged as an advisory recomputation.
pub fn amend_outcome(
    state: &TrialState,
    patient: usize,
    y: bool,
    z: bool,
    reason: &str,
    expected_version: u64,
    cmd: &Command,
) -> Result<Applied, ConductorError> {
    check_version(state, expected_version)?;
    let Some(prev) = state.data.records.get(patient).copied() else {
        return Err(ConductorError::InvalidAmendment(format!(
            "patient {patient} has no recorded outcome"
        )));
    };
    if prev.y == y && prev.z == z {
        return Err(ConductorError::InvalidAmendment("outcome unchanged".into()));
    }
    let mut data = state.data.clone();
    data.records[patient].y = y;
    data.records[patient].z = z;
    let advisory = recompute(state, &data, patient)?;
    let next_dose = if state.phase == Phase::PhaseI && state.enrolled() == state.completed() {
        Some(phase1_dose(&state.config, &data)?)
    } else {
        None
    };
    let mut em = Emitter::new(cmd, Some(state));
    em.push(EventKind::Amendment {
        change: AmendmentChange::Outcome {
            patient,
            y,
            z,
            previous_y: prev.y,
            previous_z: prev.z,
        },
        reason: reason.into(),
        advisory,
        next_dose,
    });
    Ok(Applied {
        state: apply_all(state.clone(), &em.events),
        events: em.events,
    })
}

/// Replaces the stopping bounds. Allowed only before the first interim
/// analysis, for instance once a calibration job run on the Phase I data
/// has finished.
pub fn amend_thresholds(
    state: &TrialState,
    thresholds: Thresholds,
    reason: &str,
    expected_version: u64,
    cmd: &Command,
) -> Result<Applied, ConductorError> {
    if state.phase == Phase::Terminated {
        return Err(ConductorError::AlreadyTerminated);
    }
    check_version(state, expected_version)?;
    if !state.analyses.is_empty() {
        return Err(ConductorError::InvalidAmendment(
            "thresholds are fixed once an interim analysis has run".into(),
        ));
    }
    thresholds
        .validate()
        .map_err(|e| ConductorError::InvalidConfig(vec![FieldError::new("thresholds", e.to_string())]))?;
    let mut em = Emitter::new(cmd, Some(state));
    em.push(EventKind::Amendment {
        change: AmendmentChange::Thresholds {
            previous: state.config.thresholds.clone(),
            thresholds,
        },
        reason: reason.into(),
        advisory: Vec::new(),
        next_dose: None,
    });
    Ok(Applied {
        state: apply_all(state.clone(), &em.events),
        events: em.events,
    })
}

/// Point estimates of the dose-response curves from the completed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CurveEstimates {
    Parametric {
        toxicity: FittedCurve,
        efficacy: FittedCurve,
    },
    Isotonic {
        levels: Vec<f64>,
        n: Vec<u32>,
        phi: Vec<f64>,
        pi: Vec<f64>,
    },
}

pub fn curve_estimates(cfg: &TrialConfig, data: &TrialData) -> Result<Option<CurveEstimates>, ConductorError> {
    if data.is_empty() {
        return Ok(None);
    }
    Ok(Some(match cfg.analysis.mode {
        AnalysisMode::Parametric => {
            let xs = data.doses();
            let fit = |o| logistic_sup(&xs, &data.outcomes(o), cfg.analysis.delta).map(|f| f.curve);
            CurveEstimates::Parametric {
                toxicity: fit(Outcome::Toxicity)?,
                efficacy: fit(Outcome::Efficacy)?,
            }
        }
        AnalysisMode::Isotonic => {
            let grid = cfg.domain.grid().expect("isotonic analysis runs on a grid");
            let counts = DoseCounts::from_data(data, &grid)?;
            CurveEstimates::Isotonic {
                n: counts.levels.iter().map(|l| l.n).collect(),
                phi: pava_isotonic_mle(&counts, Outcome::Toxicity),
                pi: pava_isotonic_mle(&counts, Outcome::Efficacy),
                levels: grid.levels,
            }
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub enrolled: usize,
    pub completed: usize,
    pub m: usize,
    pub taus: Vec<usize>,
    pub current_k: usize,
    pub k_max: usize,
    /// Enrolled patients still awaiting an outcome.
    pub awaiting: Vec<usize>,
    pub can_enroll: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial_id: String,
    pub version: u64,
    pub phase: Phase,
    pub recommendation: Option<f64>,
    pub progress: Progress,
    pub thresholds: Option<Thresholds>,
    pub phase1: Option<Phase1Estimates>,
    pub mtd: Option<MtdEstimate>,
    pub estimates: Option<CurveEstimates>,
    pub latest: Option<InterimDecision>,
    pub verdicts: Vec<VerdictRecord>,
    pub terminal: Option<VerdictRecord>,
    pub advisories: Vec<AdvisoryRecomputation>,
    pub audit: Vec<Event>,
}

/// Read-only snapshot of a trial for display.
pub fn trial_report(state: &TrialState, events: &[Event]) -> Result<TrialReport, ConductorError> {
    let schedule = state.config.schedule();
    Ok(TrialReport {
        trial_id: state.trial_id.clone(),
        version: state.version,
        phase: state.phase,
        recommendation: state.recommendation,
        progress: Progress {
            enrolled: state.enrolled(),
            completed: state.completed(),
            m: schedule.m,
            taus: schedule.taus(),
            current_k: state.current_k,
            k_max: schedule.k_max(),
            awaiting: (state.completed()..state.enrolled()).collect(),
            can_enroll: state.phase != Phase::Terminated && state.enrolled() < state.enrollment_limit(),
        },
        thresholds: state.config.thresholds.clone(),
        phase1: state.phase1.clone(),
        mtd: state.mtd,
        estimates: curve_estimates(&state.config, &state.data)?,
        latest: state.analyses.last().map(|a| a.decision.clone()),
        verdicts: state.verdicts.clone(),
        terminal: state.terminal_verdict(),
        advisories: state.advisories.clone(),
        audit: events.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfStep {
    pub patient: usize,
    pub dose: f64,
    pub y: bool,
    pub z: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub steps: Vec<WhatIfStep>,
    pub phase: Phase,
    pub recommendation: Option<f64>,
}

/// Outcomes of hypothetical upcoming patients, in order, starting with any
/// already enrolled but still awaiting an outcome. Nothing is persisted.
pub fn what_if(state: &TrialState, outcomes: &[(bool, bool)]) -> Result<WhatIf, ConductorError> {
    let cmd = Command::new("what-if", DateTime::<Utc>::UNIX_EPOCH);
    let mut s = state.clone();
    let mut steps = Vec::with_capacity(outcomes.len());
    for &(y, z) in outcomes {
        if s.phase == Phase::Terminated {
            break;
        }
        let patient = s.completed();
        if patient >= s.enrolled() {
            s = enroll(&s, s.version, &cmd)?.state;
        }
        let applied = record_outcome(&s, patient, y, z, s.version, &cmd)?;
        let mut step = WhatIfStep {
            patient,
            dose: s.doses[patient],
            y,
            z,
            analysis: None,
            verdict: None,
        };
        for e in &applied.events {
            match &e.kind {
                EventKind::InterimAnalysis { analysis, .. } => step.analysis = Some(analysis.clone()),
                EventKind::Decision { verdict, .. } => step.verdict = Some(*verdict),
                _ => {}
            }
        }
        steps.push(step);
        s = applied.state;
    }
    Ok(WhatIf {
        steps,
        phase: s.phase,
        recommendation: s.recommendation,
    })
}

#[cfg(test)]
mod tests;
