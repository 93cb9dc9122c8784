//! Client-side decision privacy for black-box text classifiers.
//!
//! Each real instance `x` is hidden behind balanced groups of obfuscator
//! sentences. The client sends `[b; x]` and `b` for every obfuscator `b` in
//! shuffled order, optionally encoded by a randomized representation
//! generator, and recovers the label of `x` locally from the confidence
//! differences between the two responses.

pub mod analytics;
pub mod backend;
pub mod error;
pub mod obfuscation;
pub mod pprg;
pub mod resolution;
pub mod streams;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    argmax_label, normalize, CorrelationLedger, Couple, DecisionDistribution, Instance, InstanceId, LabelSet,
    Obfuscator, Payload, RequestId, RequestRecord, Role, WireRequest, WireResponse,
};
