//! Survival-supervised neural topic modeling over discretized tabular data.
//!
//! The library jointly trains a logistic-normal topic model (amortized
//! encoder, background-plus-deviation decoder) and a Cox proportional-hazards
//! head on bag-of-words counts with right-censored time-to-event labels. It
//! covers the full workflow: ingesting tabular data into a count corpus,
//! joint minibatch training, Breslow baseline estimation, survival-curve
//! prediction, time-dependent concordance evaluation with bootstrap
//! confidence intervals, and topic interpretation artifacts.

pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod grad;
pub mod interpret;
pub mod survival;
pub mod topic;
pub mod trainer;
