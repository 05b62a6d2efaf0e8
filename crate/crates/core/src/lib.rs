//! Zero-shot lyrics transcription: vocal gating, prompted multi-run speech
//! recognition, LLM ensembling, timestamp alignment, dataset construction and
//! word error rate evaluation. Model inference sits behind backend traits
//! with HTTP and scripted implementations.

pub mod align;
pub mod asr;
pub mod backend;
pub mod ensemble;
pub mod eval;
pub mod gate;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod textnorm;
