//! Integrated Phase I-II dose-finding and efficacy testing.
//!
//! Phase I finds the maximum tolerated dose (MTD) with a Bayesian
//! escalation design; Phase II keeps re-estimating the MTD while running
//! group-sequential generalized likelihood ratio (GLR) tests of efficacy at
//! it, in parametric (logistic) or order-restricted (isotonic) form.

pub mod calibrate;
pub mod conductor;
pub mod inference;
pub mod models;
pub mod ocsim;
pub mod phase1;
pub mod phase2;
pub mod rng;
pub mod seqtest;
pub mod simon;
pub mod truth;

mod serde_inf;
