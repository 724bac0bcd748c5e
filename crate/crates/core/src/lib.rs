//! Hallucination scoring, calibration, multi-score aggregation and
//! budget-constrained score selection for LLM outputs.

pub mod backends;
pub mod exec;
pub mod model;
pub mod pipeline;
pub mod scorers;
pub mod aggregation;
pub mod budget;
pub mod calibration;
pub mod evaluation;
