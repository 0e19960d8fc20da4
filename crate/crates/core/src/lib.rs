//! CaDSI-style recommendation pipeline: heterogeneous-graph pretraining,
//! disentangled intent learning, semantics-aware prediction, and causal
//! debiasing through backdoor adjustment, plus a synthetic confounded-data
//! generator and a ranking evaluation harness.

// numeric kernels index several parallel arrays at once
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod eval;
pub mod hetsg;
pub mod hin;
pub mod intents;
pub mod intervention;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod vecmath;
pub mod walks;
