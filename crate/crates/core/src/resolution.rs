//! Decision resolution: recover the label of `x` from the distributions of
//! its `[b; x]` and `b` requests by averaging the per-label confidence
//! differences over the group and taking the argmax.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, CorrelationLedger, DecisionDistribution, InstanceId, RequestId};

/// Model outputs for one obfuscator: on `[b; x]` and on `b` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedCouple {
    pub pair: DecisionDistribution,
    pub bare: DecisionDistribution,
}

impl ObservedCouple {
    pub fn new(pair: DecisionDistribution, bare: DecisionDistribution) -> Self {
        Self { pair, bare }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionResult {
    pub label: usize,
    /// Group-averaged confidence difference per label.
    pub diff_scores: Vec<f64>,
    /// Top diff score minus the runner-up.
    pub margin: f64,
}

fn label_count(couples: &[ObservedCouple]) -> Result<usize> {
    let first = couples.first().ok_or(Error::Balance {
        expected: 1,
        actual: 0,
    })?;
    let n = first.pair.len();
    for c in couples {
        for d in [&c.pair, &c.bare] {
            if d.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    actual: d.len(),
                });
            }
        }
    }
    Ok(n)
}

/// Sum over couples of `pair - bare`, divided by `divisor`.
pub fn difference_scores(couples: &[ObservedCouple], divisor: f64) -> Vec<f64> {
    let n = couples.first().map_or(0, |c| c.pair.len());
    let mut sums = vec![0.0; n];
    for c in couples {
        for (i, s) in sums.iter_mut().enumerate() {
            *s += c.pair.probs()[i] - c.bare.probs()[i];
        }
    }
    sums.into_iter().map(|s| s / divisor).collect()
}

fn finish(diff_scores: Vec<f64>) -> ResolutionResult {
    let label = argmax(&diff_scores);
    let runner_up = diff_scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    ResolutionResult {
        label,
        margin: (diff_scores[label] - runner_up).max(0.0),
        diff_scores,
    }
}

/// Resolves from one unit group: exactly one couple per label.
pub fn resolve_unit(couples: &[ObservedCouple]) -> Result<usize> {
    let n = label_count(couples)?;
    if couples.len() != n {
        return Err(Error::Balance {
            expected: n,
            actual: couples.len(),
        });
    }
    Ok(resolve(couples, 1)?.label)
}

/// Resolves from `n` unit groups, i.e. `n * |C|` couples.
pub fn resolve(couples: &[ObservedCouple], n: usize) -> Result<ResolutionResult> {
    let labels = label_count(couples)?;
    if n == 0 || couples.len() != n * labels {
        return Err(Error::Balance {
            expected: n * labels,
            actual: couples.len(),
        });
    }
    Ok(finish(difference_scores(couples, n as f64)))
}

/// Resolution without the balance requirement; the divisor is the number of
/// couples over the label count. Used for the unbalanced sampling baseline.
pub fn resolve_unbalanced(couples: &[ObservedCouple]) -> Result<ResolutionResult> {
    let labels = label_count(couples)?;
    Ok(finish(difference_scores(couples, couples.len() as f64 / labels as f64)))
}

/// Couples of one instance looked up from the responses.
pub fn gather_couples(
    instance: &InstanceId,
    responses: &HashMap<RequestId, DecisionDistribution>,
    ledger: &CorrelationLedger,
) -> Result<Vec<ObservedCouple>> {
    let couples = ledger
        .couples(instance)
        .ok_or_else(|| Error::Input(format!("instance {instance} not in ledger")))?;
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(couples.len());
    for c in couples {
        match (responses.get(&c.pair), responses.get(&c.bare)) {
            (Some(p), Some(b)) => out.push(ObservedCouple::new(p.clone(), b.clone())),
            (p, b) => {
                if p.is_none() {
                    missing.push(c.pair);
                }
                if b.is_none() && !missing.contains(&c.bare) {
                    missing.push(c.bare);
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(Error::IncompleteBatch { missing })
    }
}

/// Resolves one instance; `n` is inferred as couples / label count.
pub fn resolve_instance(
    instance: &InstanceId,
    responses: &HashMap<RequestId, DecisionDistribution>,
    ledger: &CorrelationLedger,
) -> Result<ResolutionResult> {
    let couples = gather_couples(instance, responses, ledger)?;
    let labels = label_count(&couples)?;
    if couples.len() % labels != 0 {
        return Err(Error::Balance {
            expected: couples.len().next_multiple_of(labels),
            actual: couples.len(),
        });
    }
    resolve(&couples, couples.len() / labels)
}

/// Resolves every instance in the ledger. Fails if any response is absent,
/// listing all missing request ids.
pub fn resolve_batch(
    responses: &HashMap<RequestId, DecisionDistribution>,
    ledger: &CorrelationLedger,
) -> Result<BTreeMap<InstanceId, ResolutionResult>> {
    let mut missing: Vec<RequestId> = ledger.request_ids().filter(|id| !responses.contains_key(id)).copied().collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::IncompleteBatch { missing });
    }
    ledger
        .iter()
        .map(|(id, _)| Ok((id.clone(), resolve_instance(id, responses, ledger)?)))
        .collect()
}
