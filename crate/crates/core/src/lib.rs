//! Dynamic mortality-risk modeling pipeline for test-confirmed infectious
//! disease cohorts.
//!
//! The crate covers the full workflow: ingesting line-delimited subject
//! records, time-windowed feature encoding ([`cohort`]), synthetic cohorts
//! with a planted-hazard oracle ([`synth`]), a from-scratch bagged
//! decision-tree classifier with Gini importances ([`forest`]), Cox
//! proportional-hazards fitting ([`cox`]), leave-one-out evaluation with
//! class balancing and ROC/F-β metrics ([`eval`]), the two-stage feature
//! funnel ([`selection`]), and externally supplied risk equations
//! ([`external`]).

pub mod cohort;
pub mod cox;
pub mod eval;
pub mod external;
pub mod forest;
pub mod seeding;
pub mod selection;
pub mod synth;
