//! Instance obfuscation: the obfuscator pool, balanced group sampling,
//! concatenation with length expansion, and shuffled request scheduling.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::error::{Error, Result};
use crate::types::{CorrelationLedger, Couple, Instance, InstanceId, Obfuscator, Payload, RequestId, RequestRecord, Role};

/// Pre-computed obfuscators, bucketed by predicted label and sorted by
/// descending confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoolRepr")]
pub struct ObfuscatorPool {
    backend_fingerprint: String,
    min_confidence: f64,
    by_label: Vec<Vec<Obfuscator>>,
}

#[derive(Deserialize)]
struct PoolRepr {
    backend_fingerprint: String,
    min_confidence: f64,
    by_label: Vec<Vec<Obfuscator>>,
}

impl TryFrom<PoolRepr> for ObfuscatorPool {
    type Error = Error;
    fn try_from(r: PoolRepr) -> Result<Self> {
        Self::from_buckets(r.backend_fingerprint, r.min_confidence, r.by_label)
    }
}

impl ObfuscatorPool {
    /// Builds a pool from already-classified obfuscators, checking every
    /// invariant. Buckets are re-sorted by descending confidence.
    pub fn from_buckets(
        backend_fingerprint: String,
        min_confidence: f64,
        mut by_label: Vec<Vec<Obfuscator>>,
    ) -> Result<Self> {
        check_min_confidence(min_confidence)?;
        let n = by_label.len();
        for (label, bucket) in by_label.iter_mut().enumerate() {
            for b in bucket.iter() {
                if b.predicted_label != label || b.predicted_label >= n {
                    return Err(Error::Input(format!(
                        "obfuscator {} predicted {} stored under label {label}",
                        b.id, b.predicted_label
                    )));
                }
                if b.confidence < min_confidence || b.confidence > 1.0 {
                    return Err(Error::Input(format!(
                        "obfuscator {} confidence {} outside [{min_confidence}, 1]",
                        b.id, b.confidence
                    )));
                }
            }
            sort_bucket(bucket);
        }
        let pool = Self {
            backend_fingerprint,
            min_confidence,
            by_label,
        };
        pool.check_coverage()?;
        Ok(pool)
    }

    pub fn label_count(&self) -> usize {
        self.by_label.len()
    }

    pub fn min_confidence(&self) -> f64 {
        self.min_confidence
    }

    pub fn backend_fingerprint(&self) -> &str {
        &self.backend_fingerprint
    }

    pub fn bucket(&self, label: usize) -> &[Obfuscator] {
        &self.by_label[label]
    }

    pub fn len(&self) -> usize {
        self.by_label.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Obfuscator> {
        self.by_label.iter().flatten()
    }

    fn check_coverage(&self) -> Result<()> {
        match self.by_label.iter().position(Vec::is_empty) {
            Some(label) => Err(Error::PoolCoverage { label }),
            None => Ok(()),
        }
    }
}

fn check_min_confidence(min_confidence: f64) -> Result<()> {
    if !(0.0..1.0).contains(&min_confidence) {
        return Err(Error::Parameter(format!(
            "min_confidence must be in [0, 1), got {min_confidence}"
        )));
    }
    Ok(())
}

fn sort_bucket(bucket: &mut [Obfuscator]) {
    bucket.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.id.cmp(&b.id)));
}

/// Classifies every candidate and keeps those whose confidence reaches
/// `min_confidence`. Gold labels on the candidates are ignored.
pub fn build_pool(
    candidates: &[Instance],
    model: &dyn ModelBackend,
    min_confidence: f64,
) -> Result<ObfuscatorPool> {
    check_min_confidence(min_confidence)?;
    if candidates.is_empty() {
        return Err(Error::Input("no obfuscator candidates".into()));
    }
    let classified: Vec<Obfuscator> = candidates
        .par_iter()
        .map(|c| {
            let d = model.classify_text(&c.text)?;
            Ok(Obfuscator::from_prediction(c.id.0.clone(), c.text.clone(), &d))
        })
        .collect::<Result<_>>()?;
    let mut by_label = vec![Vec::new(); model.label_set().len()];
    for b in classified {
        if b.confidence >= min_confidence {
            by_label[b.predicted_label].push(b);
        }
    }
    ObfuscatorPool::from_buckets(model.fingerprint(), min_confidence, by_label)
}

/// One obfuscator per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitGroup {
    members: Vec<Obfuscator>,
}

impl UnitGroup {
    pub fn new(members: Vec<Obfuscator>) -> Result<Self> {
        let n = members.len();
        let mut seen = vec![false; n];
        for m in &members {
            if m.predicted_label >= n || std::mem::replace(&mut seen[m.predicted_label], true) {
                return Err(Error::Balance {
                    expected: n,
                    actual: members.iter().filter(|b| b.predicted_label < n).count(),
                });
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Obfuscator] {
        &self.members
    }
}

/// `n` unit groups serving one real instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationGroup {
    pub instance_id: InstanceId,
    pub unit_groups: Vec<UnitGroup>,
    pub expansion_k: usize,
}

impl ObfuscationGroup {
    pub fn new(instance_id: InstanceId, unit_groups: Vec<UnitGroup>, expansion_k: usize) -> Result<Self> {
        if unit_groups.is_empty() {
            return Err(Error::Parameter("a group needs at least one unit group".into()));
        }
        if expansion_k == 0 {
            return Err(Error::Parameter("expansion_k must be at least 1".into()));
        }
        Ok(Self {
            instance_id,
            unit_groups,
            expansion_k,
        })
    }

    pub fn obfuscators(&self) -> impl Iterator<Item = &Obfuscator> {
        self.unit_groups.iter().flat_map(|g| g.members.iter())
    }

    pub fn len(&self) -> usize {
        self.unit_groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bucket order with runs of equal confidence shuffled.
fn tie_shuffled<'a, R: Rng + ?Sized>(bucket: &'a [Obfuscator], rng: &mut R) -> Vec<&'a Obfuscator> {
    let mut out: Vec<&Obfuscator> = bucket.iter().collect();
    let mut start = 0;
    while start < out.len() {
        let c = out[start].confidence;
        let end = start + out[start..].iter().take_while(|b| b.confidence == c).count();
        out[start..end].shuffle(rng);
        start = end;
    }
    out
}

pub fn sample_unit_group<R: Rng + ?Sized>(pool: &ObfuscatorPool, rng: &mut R) -> Result<UnitGroup> {
    Ok(sample_group(pool, 1, rng)?.remove(0))
}

/// `n` unit groups with distinct members, highest-confidence obfuscators first.
pub fn sample_group<R: Rng + ?Sized>(pool: &ObfuscatorPool, n: usize, rng: &mut R) -> Result<Vec<UnitGroup>> {
    if n == 0 {
        return Err(Error::Parameter("group count n must be at least 1".into()));
    }
    pool.check_coverage()?;
    let mut per_label = Vec::with_capacity(pool.label_count());
    for label in 0..pool.label_count() {
        let bucket = pool.bucket(label);
        if bucket.len() < n {
            return Err(Error::PoolDepth {
                label,
                required: n,
                available: bucket.len(),
            });
        }
        per_label.push(tie_shuffled(bucket, rng));
    }
    Ok((0..n)
        .map(|i| UnitGroup {
            members: per_label.iter().map(|picks| picks[i].clone()).collect(),
        })
        .collect())
}

/// `count` distinct obfuscators drawn uniformly from the whole pool,
/// ignoring labels. Used as the unbalanced baseline.
pub fn sample_unbalanced<R: Rng + ?Sized>(pool: &ObfuscatorPool, count: usize, rng: &mut R) -> Result<Vec<Obfuscator>> {
    let all: Vec<&Obfuscator> = pool.iter().collect();
    if count > all.len() {
        return Err(Error::PoolDepth {
            label: 0,
            required: count,
            available: all.len(),
        });
    }
    Ok(all.choose_multiple(rng, count).map(|b| (*b).clone()).collect())
}

/// The texts sent for one obfuscator: `[b^k ; x]` and `b^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscatedCouple {
    pub obfuscator_id: String,
    pub paired: String,
    pub bare: String,
    /// `k|b| + |x|` after truncation, separator excluded.
    pub content_tokens: usize,
}

/// Concatenation settings taken from the target backend.
#[derive(Debug, Clone)]
pub struct ConcatPolicy {
    pub separator: String,
    pub max_sequence_length: usize,
}

impl ConcatPolicy {
    pub fn for_backend(backend: &dyn ModelBackend) -> Self {
        Self {
            separator: backend.separator().to_owned(),
            max_sequence_length: backend.max_sequence_length(),
        }
    }
}

/// Builds the obfuscator block `b` repeated `k` times, truncated from its
/// right edge so that block, separator and `x` fit the sequence budget. The
/// block never shrinks below one copy of `b`, and `x` is never cut.
pub fn expand_block(b: &str, k: usize, x_tokens: usize, policy: &ConcatPolicy) -> Vec<String> {
    let b_tokens: Vec<&str> = b.split_whitespace().collect();
    let full = b_tokens.len() * k;
    let budget = policy.max_sequence_length.saturating_sub(x_tokens + 1);
    let keep = full.min(budget.max(b_tokens.len()));
    b_tokens.iter().cycle().take(keep).map(|t| (*t).to_owned()).collect()
}

pub fn obfuscate(x: &Instance, group: &ObfuscationGroup, policy: &ConcatPolicy) -> Vec<ObfuscatedCouple> {
    obfuscate_with(x, group.obfuscators(), group.expansion_k, policy)
}

/// Same as [`obfuscate`] for an arbitrary obfuscator list, e.g. one drawn
/// without label balancing.
pub fn obfuscate_with<'a>(
    x: &Instance,
    obfuscators: impl IntoIterator<Item = &'a Obfuscator>,
    expansion_k: usize,
    policy: &ConcatPolicy,
) -> Vec<ObfuscatedCouple> {
    let x_tokens = x.text.split_whitespace().count();
    obfuscators
        .into_iter()
        .map(|b| {
            let block = expand_block(&b.text, expansion_k, x_tokens, policy);
            let bare = block.join(" ");
            ObfuscatedCouple {
                obfuscator_id: b.id.clone(),
                paired: format!("{bare} {} {}", policy.separator, x.text.trim()),
                content_tokens: block.len() + x_tokens,
                bare,
            }
        })
        .collect()
}

/// Client-side plan for one couple, after any encoding.
#[derive(Debug, Clone)]
pub struct PlannedCouple {
    /// Identifies the bare request for reuse: couples with equal keys share one
    /// bare request when bares are shared. Normally the bare plaintext.
    pub bare_key: String,
    pub paired: Payload,
    pub bare: Payload,
}

#[derive(Debug, Clone)]
pub struct InstancePlan {
    pub instance_id: InstanceId,
    pub couples: Vec<PlannedCouple>,
}

/// Whether bare obfuscator requests are shared across couples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReusePolicy {
    /// One bare request per couple: `2 k n |C|` requests for `k` instances.
    None,
    /// One bare request per distinct bare key.
    Full,
}

#[derive(Debug, Clone)]
pub struct ObfuscatedBatch {
    pub records: Vec<RequestRecord>,
    pub ledger: CorrelationLedger,
}

/// Assigns random request ids, records the correlation ledger and shuffles
/// every record into a uniformly random order.
pub fn schedule<R: Rng + ?Sized>(plans: Vec<InstancePlan>, reuse: ReusePolicy, rng: &mut R) -> Result<ObfuscatedBatch> {
    if plans.is_empty() {
        return Err(Error::Input("nothing to schedule".into()));
    }
    let shared = reuse == ReusePolicy::Full;
    let mut ledger = CorrelationLedger::new(shared);
    let mut records = Vec::new();
    let mut bare_ids: HashMap<String, RequestId> = HashMap::new();
    for plan in plans {
        let mut couples = Vec::with_capacity(plan.couples.len());
        for c in plan.couples {
            let pair = RequestId::random(rng);
            records.push(RequestRecord {
                request_id: pair,
                payload: c.paired,
                role: Role::ObfuscatedPair,
                owner_instance: Some(plan.instance_id.clone()),
            });
            let bare = match bare_ids.get(&c.bare_key) {
                Some(id) if shared => *id,
                _ => {
                    let id = RequestId::random(rng);
                    records.push(RequestRecord {
                        request_id: id,
                        payload: c.bare,
                        role: Role::BareObfuscator,
                        owner_instance: (!shared).then(|| plan.instance_id.clone()),
                    });
                    if shared {
                        bare_ids.insert(c.bare_key, id);
                    }
                    id
                }
            };
            couples.push(Couple { pair, bare });
        }
        ledger.insert(plan.instance_id, couples)?;
    }
    records.shuffle(rng);
    Ok(ObfuscatedBatch { records, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FillerBank, SentenceProfile, SyntheticConfig, SyntheticLexiconModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ob(id: &str, label: usize, conf: f64) -> Obfuscator {
        Obfuscator {
            id: id.into(),
            text: format!("text of {id}"),
            predicted_label: label,
            confidence: conf,
        }
    }

    fn pool_from(obs: Vec<Obfuscator>, labels: usize) -> ObfuscatorPool {
        let mut by_label = vec![Vec::new(); labels];
        for b in obs {
            by_label[b.predicted_label].push(b);
        }
        ObfuscatorPool::from_buckets("test".into(), 0.0, by_label).unwrap()
    }

    fn deep_pool(labels: usize, depth: usize) -> ObfuscatorPool {
        let obs = (0..labels)
            .flat_map(|l| (0..depth).map(move |i| ob(&format!("b{l}_{i}"), l, 0.99 - i as f64 * 0.01)))
            .collect();
        pool_from(obs, labels)
    }

    fn synthetic() -> SyntheticLexiconModel {
        SyntheticLexiconModel::new(SyntheticConfig::default()).unwrap()
    }

    fn candidates(m: &SyntheticLexiconModel, count: usize, seed: u64) -> Vec<Instance> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut profile = SentenceProfile::candidates(FillerBank::InDomain);
        profile.marker_rate = 0.3;
        (0..count)
            .map(|i| {
                let label = i % 2;
                Instance::new(format!("c{i}"), m.sample_sentence(label, &profile, &mut rng), Some(1 - label)).unwrap()
            })
            .collect()
    }

    #[test]
    fn pool_matches_filter_and_sort_oracle() {
        let m = synthetic();
        let cands = candidates(&m, 10, 42);
        let pool = build_pool(&cands, &m, 0.6).unwrap();

        // oracle: classify sequentially, filter, then insertion-sort each bucket
        let mut expected: Vec<Vec<(String, f64)>> = vec![Vec::new(); 2];
        for c in &cands {
            let d = m.classify_text(&c.text).unwrap();
            let (mut best, mut conf) = (0, d.probs()[0]);
            for (i, p) in d.probs().iter().enumerate() {
                if *p > conf {
                    best = i;
                    conf = *p;
                }
            }
            if conf >= 0.6 {
                let bucket = &mut expected[best];
                let pos = bucket
                    .iter()
                    .position(|(id, cf)| conf > *cf || (conf == *cf && c.id.0 < *id))
                    .unwrap_or(bucket.len());
                bucket.insert(pos, (c.id.0.clone(), conf));
            }
        }
        for label in 0..2 {
            let got: Vec<(String, f64)> = pool.bucket(label).iter().map(|b| (b.id.clone(), b.confidence)).collect();
            assert_eq!(got, expected[label]);
        }
        assert!(pool.iter().all(|b| b.confidence >= 0.6));
    }

    #[test]
    fn zero_threshold_partitions_candidates() {
        let m = synthetic();
        let cands = candidates(&m, 30, 7);
        let pool = build_pool(&cands, &m, 0.0).unwrap();
        assert_eq!(pool.len(), 30);
        let mut ids: Vec<&str> = pool.iter().map(|b| b.id.as_str()).collect();
        ids.sort();
        let mut want: Vec<&str> = cands.iter().map(|c| c.id.0.as_str()).collect();
        want.sort();
        assert_eq!(ids, want);
    }

    #[test]
    fn high_threshold_pool_members_exceed_it() {
        let m = synthetic();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let profile = SentenceProfile::candidates(FillerBank::InDomain);
        let cands: Vec<Instance> = (0..400)
            .map(|i| Instance::new(format!("c{i}"), m.sample_sentence(i % 2, &profile, &mut rng), None).unwrap())
            .collect();
        let pool = build_pool(&cands, &m, 0.99).unwrap();
        assert!(pool.iter().all(|b| b.confidence > 0.99));
    }

    #[test]
    fn empty_label_is_a_coverage_error() {
        let m = synthetic();
        let text = m.markers(0).join(" ");
        let cands = vec![Instance::new("only", text, None).unwrap()];
        assert_eq!(build_pool(&cands, &m, 0.5).unwrap_err(), Error::PoolCoverage { label: 1 });
        assert!(build_pool(&[], &m, 0.5).is_err());
        assert!(build_pool(&cands, &m, 1.0).is_err());
    }

    #[test]
    fn pool_json_round_trip_and_validation() {
        let pool = deep_pool(3, 2);
        let json = serde_json::to_string(&pool).unwrap();
        assert_eq!(serde_json::from_str::<ObfuscatorPool>(&json).unwrap(), pool);
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["by_label"][2] = serde_json::json!([]);
        assert!(serde_json::from_value::<ObfuscatorPool>(v).is_err());
    }

    #[test]
    fn unit_group_covers_every_label() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for labels in [3, 5] {
            let g = sample_unit_group(&deep_pool(labels, 4), &mut rng).unwrap();
            let mut got: Vec<usize> = g.members().iter().map(|b| b.predicted_label).collect();
            got.sort();
            assert_eq!(got, (0..labels).collect::<Vec<_>>());
        }
    }

    #[test]
    fn forced_selection_ignores_seed() {
        let pool = deep_pool(3, 1);
        let a = sample_unit_group(&pool, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let b = sample_unit_group(&pool, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_confidence_first_with_tie_shuffle() {
        let obs = vec![
            ob("hi", 0, 0.99),
            ob("lo", 0, 0.90),
            ob("t1", 1, 0.95),
            ob("t2", 1, 0.95),
            ob("t3", 1, 0.95),
            ob("low1", 1, 0.80),
        ];
        let pool = pool_from(obs, 2);
        let mut seen = std::collections::HashSet::new();
        for seed in 0..50 {
            let g = sample_unit_group(&pool, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(g.members()[0].id, "hi");
            assert!(g.members()[1].id.starts_with('t'));
            seen.insert(g.members()[1].id.clone());
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn group_sizes() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let g = sample_group(&deep_pool(2, 3), 1, &mut rng).unwrap();
        assert_eq!(g.iter().map(|u| u.members().len()).sum::<usize>(), 2);
        let g = sample_group(&deep_pool(5, 5), 5, &mut rng).unwrap();
        assert_eq!(g.iter().map(|u| u.members().len()).sum::<usize>(), 25);
    }

    #[test]
    fn exhaustive_assignment_uses_every_member_once() {
        let pool = deep_pool(3, 2);
        let groups = sample_group(&pool, 2, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let mut used: Vec<&str> = groups.iter().flat_map(|g| g.members().iter().map(|b| b.id.as_str())).collect();
        used.sort();
        let mut all: Vec<&str> = pool.iter().map(|b| b.id.as_str()).collect();
        all.sort();
        assert_eq!(used, all);
    }

    #[test]
    fn shallow_pool_reports_depth() {
        let err = sample_group(&deep_pool(2, 2), 3, &mut ChaCha20Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(err, Error::PoolDepth { label: 0, required: 3, available: 2 });
    }

    #[test]
    fn unit_group_rejects_duplicate_labels() {
        assert!(UnitGroup::new(vec![ob("a", 0, 0.9), ob("b", 0, 0.9)]).is_err());
        assert!(UnitGroup::new(vec![ob("a", 1, 0.9), ob("b", 0, 0.9)]).is_ok());
    }

    fn policy(max: usize) -> ConcatPolicy {
        ConcatPolicy {
            separator: "⟂".into(),
            max_sequence_length: max,
        }
    }

    #[test]
    fn direct_concatenation() {
        let x = Instance::new("x", "awful plot", None).unwrap();
        let b = Obfuscator { text: "great movie".into(), ..ob("b", 0, 0.99) };
        let group = ObfuscationGroup::new("x".into(), vec![UnitGroup::new(vec![b]).unwrap()], 1).unwrap();
        let out = obfuscate(&x, &group, &policy(128));
        assert_eq!(out[0].paired, "great movie ⟂ awful plot");
        assert_eq!(out[0].bare, "great movie");
    }

    #[test]
    fn length_expansion_counts() {
        let x = Instance::new("x", "awful plot", None).unwrap();
        let b = Obfuscator { text: "great movie".into(), ..ob("b", 0, 0.99) };
        let group = ObfuscationGroup::new("x".into(), vec![UnitGroup::new(vec![b]).unwrap()], 3).unwrap();
        let out = obfuscate(&x, &group, &policy(128));
        assert_eq!(out[0].content_tokens, 8);
        assert_eq!(out[0].paired.split_whitespace().filter(|t| *t != "⟂").count(), 8);
        assert_eq!(out[0].bare, "great movie great movie great movie");
    }

    #[test]
    fn truncation_cuts_block_not_x() {
        let x = Instance::new("x", "one two three", None).unwrap();
        // budget: 8 - 1 separator - 3 = 4 block tokens of the 6 requested
        let block = expand_block("a b", 3, 3, &policy(8));
        assert_eq!(block, ["a", "b", "a", "b"]);
        // never below one copy of b
        let block = expand_block("a b c", 2, 10, &policy(8));
        assert_eq!(block, ["a", "b", "c"]);
        let b = Obfuscator { text: "a b".into(), ..ob("b", 0, 0.99) };
        let group = ObfuscationGroup::new("x".into(), vec![UnitGroup::new(vec![b]).unwrap()], 3).unwrap();
        let out = obfuscate(&x, &group, &policy(8));
        assert!(out[0].paired.ends_with("⟂ one two three"));
        assert_eq!(out[0].bare, "a b a b");
    }

    #[test]
    fn one_couple_per_group_member() {
        let x = Instance::new("x", "some text", None).unwrap();
        let groups = sample_group(&deep_pool(3, 1), 1, &mut ChaCha20Rng::seed_from_u64(0)).unwrap();
        let group = ObfuscationGroup::new("x".into(), groups, 1).unwrap();
        assert_eq!(obfuscate(&x, &group, &policy(64)).len(), 3);
    }

    fn plan(id: &str, keys: &[&str]) -> InstancePlan {
        InstancePlan {
            instance_id: id.into(),
            couples: keys
                .iter()
                .map(|k| PlannedCouple {
                    bare_key: (*k).into(),
                    paired: Payload::Text(format!("{k} [SEP] {id}")),
                    bare: Payload::Text((*k).into()),
                })
                .collect(),
        }
    }

    #[test]
    fn schedule_counts() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch = schedule(vec![plan("x", &["b0", "b1"])], ReusePolicy::None, &mut rng).unwrap();
        assert_eq!(batch.records.len(), 4);

        let shared = || vec![plan("x1", &["b0", "b1"]), plan("x2", &["b0", "b1"]), plan("x3", &["b0", "b1"])];
        let full = schedule(shared(), ReusePolicy::Full, &mut rng).unwrap();
        let none = schedule(shared(), ReusePolicy::None, &mut rng).unwrap();
        assert_eq!(full.records.len(), 8);
        assert_eq!(none.records.len(), 12);
        assert_eq!(full.ledger.request_count(), 8);
    }

    #[test]
    fn single_record_order_is_fixed() {
        let rec = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut batch = schedule(vec![plan("x", &["b"])], ReusePolicy::None, &mut rng).unwrap();
            batch.records.retain(|r| r.role == Role::ObfuscatedPair);
            batch.records.len()
        };
        assert_eq!(rec(1), rec(2));
    }

    #[test]
    fn duplicate_instances_conflict() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let err = schedule(vec![plan("x", &["a"]), plan("x", &["b"])], ReusePolicy::None, &mut rng).unwrap_err();
        assert!(matches!(err, Error::LedgerConflict(_)));
        assert!(schedule(vec![], ReusePolicy::None, &mut rng).is_err());
    }

    #[test]
    fn ledger_covers_every_record() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let batch = schedule(vec![plan("x1", &["a", "b"]), plan("x2", &["c", "d"])], ReusePolicy::None, &mut rng).unwrap();
        let mut from_ledger: Vec<RequestId> = batch
            .ledger
            .iter()
            .flat_map(|(_, cs)| cs.iter().flat_map(|c| [c.pair, c.bare]))
            .collect();
        let mut from_records: Vec<RequestId> = batch.records.iter().map(|r| r.request_id).collect();
        from_ledger.sort();
        from_records.sort();
        assert_eq!(from_ledger, from_records);
        for r in &batch.records {
            assert_eq!(batch.ledger.role_of(&r.request_id), Some(r.role));
        }
    }

    #[test]
    fn shuffle_positions_are_uniform() {
        // 20 records, 1000 reshuffles: chi-square of one record's position
        // against the uniform 50-per-slot expectation, 19 dof, alpha 0.01.
        let plans: Vec<InstancePlan> = (0..5).map(|i| plan(&format!("x{i}"), &["a", "b"])).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let mut counts = [0usize; 20];
        for _ in 0..1000 {
            let batch = schedule(plans.clone(), ReusePolicy::None, &mut rng).unwrap();
            let first_pair = batch.ledger.couples(&"x0".into()).unwrap()[0].pair;
            let pos = batch.records.iter().position(|r| r.request_id == first_pair).unwrap();
            counts[pos] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 50.0).powi(2) / 50.0).sum();
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }
}
