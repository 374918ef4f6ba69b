//! Evaluation harness for top-k word self-explanations of chat LLMs on emotion
//! classification: prompting flows, input perturbation, confidence
//! calibration, and faithfulness/agreement metrics.

pub mod calibrate;
pub mod domain;
pub mod gateway;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod protocol;
pub mod synthetic;
