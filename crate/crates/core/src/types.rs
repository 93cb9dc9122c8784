//! Shared vocabulary: labels, decision distributions, instances, obfuscators,
//! wire requests and the client-private correlation ledger.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pprg::EncodedRepresentation;

/// Tolerance on `sum(probs) == 1`.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Ordered, duplicate-free set of label names; indices are `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::LabelSet(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::LabelSet(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// `label_0, label_1, ...` for `count` classes.
    pub fn numbered(count: usize) -> Result<Self> {
        Self::new((0..count).map(|i| format!("label_{i}")))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.labels
    }
}

/// Probability vector over a label set. Every instance satisfies the range
/// and sum-to-one checks; there is no way to build an invalid one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DecisionDistribution {
    probs: Vec<f64>,
}

impl DecisionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidDistribution(format!(
                "entry {p} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}"
            )));
        }
        Ok(Self { probs })
    }

    /// Overflow-safe softmax of raw scores.
    pub fn softmax(scores: &[f64]) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("raw scores"));
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Largest probability, i.e. the confidence of [`Self::argmax`].
    pub fn confidence(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

impl TryFrom<Vec<f64>> for DecisionDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DecisionDistribution> for Vec<f64> {
    fn from(d: DecisionDistribution) -> Self {
        d.probs
    }
}

/// Softmax of `raw_scores` checked against the label set's size.
pub fn normalize(raw_scores: &[f64], labels: &LabelSet) -> Result<DecisionDistribution> {
    if raw_scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: raw_scores.len(),
        });
    }
    DecisionDistribution::softmax(raw_scores)
}

pub fn argmax_label(d: &DecisionDistribution) -> usize {
    d.argmax()
}

/// Lowest-index argmax of a finite slice. Panics on an empty slice.
pub(crate) fn argmax(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub String);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for InstanceId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<usize>,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold_label: Option<usize>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Input("instance text is empty".into()));
        }
        Ok(Self {
            id: InstanceId(id.into()),
            text,
            gold_label,
        })
    }
}

/// A dummy sentence together with the model's prediction on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obfuscator {
    pub id: String,
    pub text: String,
    pub predicted_label: usize,
    pub confidence: f64,
}

impl Obfuscator {
    pub fn from_prediction(id: impl Into<String>, text: impl Into<String>, d: &DecisionDistribution) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            predicted_label: d.argmax(),
            confidence: d.confidence(),
        }
    }
}

/// 128-bit random request nonce, rendered as 32 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId([u8; 16]);

impl RequestId {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 32 {
            return Err(Error::Protocol(format!("request id {s:?} is not 32 hex digits")));
        }
        let mut bytes = [0u8; 16];
        hex::decode_to_slice(s, &mut bytes)
            .map_err(|e| Error::Protocol(format!("request id {s:?}: {e}")))?;
        Ok(Self(bytes))
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RequestId({})", self.to_hex())
    }
}

impl Serialize for RequestId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for RequestId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// What a request carries: plaintext, or a privacy-preserving encoding of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "lowercase")]
pub enum Payload {
    Text(String),
    Encoded(EncodedRepresentation),
}

impl Payload {
    /// Number of tokens the payload presents to the model.
    pub fn token_count(&self) -> usize {
        match self {
            Payload::Text(t) => t.split_whitespace().count(),
            Payload::Encoded(r) => r.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ObfuscatedPair,
    BareObfuscator,
}

/// One request as the client tracks it. Serializing it yields only the wire
/// fields; `role` and `owner_instance` stay on the client.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub request_id: RequestId,
    pub payload: Payload,
    #[serde(skip)]
    pub role: Role,
    #[serde(skip)]
    pub owner_instance: Option<InstanceId>,
}

impl RequestRecord {
    pub fn wire(&self) -> WireRequest {
        WireRequest {
            request_id: self.request_id,
            payload: self.payload.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub request_id: RequestId,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireResponse {
    pub request_id: RequestId,
    pub probs: Vec<f64>,
}

impl WireResponse {
    /// Checks correlation with `sent` and the distribution invariants.
    pub fn into_distribution(self, sent: RequestId, label_count: usize) -> Result<DecisionDistribution> {
        if self.request_id != sent {
            return Err(Error::Correlation {
                sent,
                received: self.request_id,
            });
        }
        if self.probs.len() != label_count {
            return Err(Error::Protocol(format!(
                "expected {label_count} probabilities, got {}",
                self.probs.len()
            )));
        }
        DecisionDistribution::new(self.probs).map_err(|e| Error::Protocol(e.to_string()))
    }
}

/// The request ids of one `(b; x)` and `b` couple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Couple {
    pub pair: RequestId,
    pub bare: RequestId,
}

/// Client-private map from instance to the couples that resolve it.
///
/// Pair request ids are unique across the ledger. Bare request ids are unique
/// too unless the ledger was created with shared bares, in which case one bare
/// request may serve many couples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LedgerRepr", into = "LedgerRepr")]
pub struct CorrelationLedger {
    entries: BTreeMap<InstanceId, Vec<Couple>>,
    shared_bares: bool,
    #[serde(skip)]
    pairs: HashSet<RequestId>,
    #[serde(skip)]
    bares: HashSet<RequestId>,
}

#[derive(Serialize, Deserialize)]
struct LedgerRepr {
    shared_bares: bool,
    entries: BTreeMap<InstanceId, Vec<Couple>>,
}

impl TryFrom<LedgerRepr> for CorrelationLedger {
    type Error = Error;
    fn try_from(r: LedgerRepr) -> Result<Self> {
        let mut ledger = CorrelationLedger::new(r.shared_bares);
        for (id, couples) in r.entries {
            ledger.insert(id, couples)?;
        }
        Ok(ledger)
    }
}

impl From<CorrelationLedger> for LedgerRepr {
    fn from(l: CorrelationLedger) -> Self {
        LedgerRepr {
            shared_bares: l.shared_bares,
            entries: l.entries,
        }
    }
}

impl CorrelationLedger {
    pub fn new(shared_bares: bool) -> Self {
        Self {
            shared_bares,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, instance: InstanceId, couples: Vec<Couple>) -> Result<()> {
        if self.entries.contains_key(&instance) {
            return Err(Error::LedgerConflict(format!("duplicate instance id {instance}")));
        }
        let mut new_pairs = HashSet::new();
        let mut new_bares = HashSet::new();
        for c in &couples {
            if c.pair == c.bare
                || self.pairs.contains(&c.pair)
                || self.bares.contains(&c.pair)
                || new_bares.contains(&c.pair)
                || !new_pairs.insert(c.pair)
            {
                return Err(Error::LedgerConflict(format!("request id {} reused", c.pair)));
            }
            let seen_bare = self.bares.contains(&c.bare) || new_bares.contains(&c.bare);
            if self.pairs.contains(&c.bare)
                || new_pairs.contains(&c.bare)
                || (seen_bare && !self.shared_bares)
            {
                return Err(Error::LedgerConflict(format!("request id {} reused", c.bare)));
            }
            new_bares.insert(c.bare);
        }
        self.pairs.extend(new_pairs);
        self.bares.extend(new_bares);
        self.entries.insert(instance, couples);
        Ok(())
    }

    pub fn shared_bares(&self) -> bool {
        self.shared_bares
    }

    pub fn couples(&self, instance: &InstanceId) -> Option<&[Couple]> {
        self.entries.get(instance).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&InstanceId, &[Couple])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every distinct request id referenced by the ledger.
    pub fn request_ids(&self) -> impl Iterator<Item = &RequestId> {
        self.pairs.iter().chain(self.bares.iter())
    }

    pub fn request_count(&self) -> usize {
        self.pairs.len() + self.bares.len()
    }

    pub fn role_of(&self, id: &RequestId) -> Option<Role> {
        if self.pairs.contains(id) {
            Some(Role::ObfuscatedPair)
        } else if self.bares.contains(id) {
            Some(Role::BareObfuscator)
        } else {
            None
        }
    }
}
