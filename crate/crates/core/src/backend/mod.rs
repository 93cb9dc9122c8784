//! Classification backends. Everything the client talks to, local or remote,
//! sits behind [`ModelBackend`].

mod synthetic;

pub use synthetic::{FillerBank, SentenceProfile, SyntheticConfig, SyntheticLexiconModel, SEPARATOR_TOKEN};

use crate::error::Result;
use crate::types::{DecisionDistribution, LabelSet, Payload, WireRequest};

/// A black-box classifier over a fixed label set.
///
/// `classify` must return a valid distribution over `label_set()` and be safe
/// to call from many threads at once.
pub trait ModelBackend: Send + Sync {
    fn label_set(&self) -> &LabelSet;

    fn max_sequence_length(&self) -> usize;

    /// Token the service uses to separate the two segments of a pair input.
    fn separator(&self) -> &str;

    /// Stable identifier of the model state, recorded in persisted pools.
    fn fingerprint(&self) -> String;

    fn classify(&self, payload: &Payload) -> Result<DecisionDistribution>;

    fn classify_text(&self, text: &str) -> Result<DecisionDistribution> {
        self.classify(&Payload::Text(text.to_owned()))
    }

    /// Classifies a scheduled request. Remote backends send its request id on
    /// the wire and check it comes back.
    fn classify_request(&self, request: &WireRequest) -> Result<DecisionDistribution> {
        self.classify(&request.payload)
    }
}

impl<T: ModelBackend + ?Sized> ModelBackend for std::sync::Arc<T> {
    fn label_set(&self) -> &LabelSet {
        (**self).label_set()
    }
    fn max_sequence_length(&self) -> usize {
        (**self).max_sequence_length()
    }
    fn separator(&self) -> &str {
        (**self).separator()
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn classify(&self, payload: &Payload) -> Result<DecisionDistribution> {
        (**self).classify(payload)
    }
    fn classify_request(&self, request: &WireRequest) -> Result<DecisionDistribution> {
        (**self).classify_request(request)
    }
}
