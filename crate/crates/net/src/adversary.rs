//! What a malicious provider sees, and the pairing attack it can run.
//!
//! The trace holds arrival order, payloads and returned distributions, and
//! nothing else. The attack tries to recover which requests form a
//! (pair, bare) couple: the pair payload starts with the bare block, so it
//! scores every ordered (longer, shorter) candidate by position-aligned
//! similarity and matches greedily.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use veil_core::pprg::cosine;
use veil_core::{CorrelationLedger, Payload, RequestId};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    /// Arrival position at the service.
    pub seq: u64,
    pub request_id: RequestId,
    pub payload: Payload,
    pub probs: Vec<f64>,
}

pub fn write_trace_jsonl(path: &Path, trace: &[TraceEntry]) -> Result<(), ServiceError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in trace {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_jsonl(path: &Path) -> Result<Vec<TraceEntry>, ServiceError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| ServiceError::Trace(format!("line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Position-aligned similarity of the first `shorter.len()` tokens.
fn prefix_similarity(longer: &Payload, shorter: &Payload) -> f64 {
    match (longer, shorter) {
        (Payload::Encoded(a), Payload::Encoded(b)) => {
            let n = b.len().min(a.len());
            let total: f64 = a.vectors()[..n]
                .iter()
                .zip(&b.vectors()[..n])
                .map(|(x, y)| cosine(x, y))
                .sum();
            total / n as f64
        }
        (Payload::Text(a), Payload::Text(b)) => {
            let b: Vec<&str> = b.split_whitespace().collect();
            let hits = a.split_whitespace().zip(&b).filter(|(x, y)| x == *y).count();
            hits as f64 / b.len().max(1) as f64
        }
        _ => 0.0,
    }
}

/// Ordered candidates (longer, shorter) by token count. A pair is always
/// strictly longer than its bare, and the attacker knows that much.
fn candidates(trace: &[TraceEntry]) -> Vec<(usize, usize)> {
    let lens: Vec<usize> = trace.iter().map(|e| e.payload.token_count()).collect();
    let mut out = Vec::new();
    for i in 0..trace.len() {
        for j in 0..trace.len() {
            if lens[i] > lens[j] {
                out.push((i, j));
            }
        }
    }
    out
}

fn greedy(mut scored: Vec<(f64, usize, usize)>, size: usize) -> Vec<(usize, usize)> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; size];
    let mut out = Vec::new();
    for (_, i, j) in scored {
        if !used[i] && !used[j] {
            used[i] = true;
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Greedy most-similar matching. Returns `(pair, bare)` trace indices.
pub fn pairing_attack(trace: &[TraceEntry]) -> Vec<(usize, usize)> {
    let scored = candidates(trace)
        .into_iter()
        .map(|(i, j)| (prefix_similarity(&trace[i].payload, &trace[j].payload), i, j))
        .collect();
    greedy(scored, trace.len())
}

/// Same matching procedure with the similarity replaced by noise.
pub fn random_pairing(trace: &[TraceEntry], rng: &mut dyn RngCore) -> Vec<(usize, usize)> {
    let mut cands = candidates(trace);
    cands.shuffle(rng);
    let scored = cands.into_iter().map(|(i, j)| (rng.random::<f64>(), i, j)).collect();
    greedy(scored, trace.len())
}

/// True `(pair, bare)` request-id couples from the client's ledger.
pub fn true_couples(ledger: &CorrelationLedger) -> HashSet<(RequestId, RequestId)> {
    ledger
        .iter()
        .flat_map(|(_, couples)| couples.iter().map(|c| (c.pair, c.bare)))
        .collect()
}

/// Fraction of true couples the guesses recover.
pub fn recovered_rate(
    trace: &[TraceEntry],
    guesses: &[(usize, usize)],
    truth: &HashSet<(RequestId, RequestId)>,
) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = guesses
        .iter()
        .filter(|(p, b)| truth.contains(&(trace[*p].request_id, trace[*b].request_id)))
        .count();
    hits as f64 / truth.len() as f64
}

/// Attack outcome over several independent traces against the spread of
/// random matching on the same traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub trials: usize,
    pub attack_rate: f64,
    pub random_mean: f64,
    pub random_low: f64,
    pub random_high: f64,
    /// Two-sided Monte-Carlo p-value of the attack mean under random matching.
    pub p_value: f64,
}

impl AttackSummary {
    pub fn within_random_interval(&self) -> bool {
        self.attack_rate >= self.random_low && self.attack_rate <= self.random_high
    }

    pub fn exceeds_random_interval(&self) -> bool {
        self.attack_rate > self.random_high
    }
}

/// Runs the attack on every trace and compares its mean recovery rate with
/// `replicates` draws of the mean rate of random matching. The interval is
/// the central 95% of those draws.
pub fn evaluate_attack(
    trials: &[(Vec<TraceEntry>, HashSet<(RequestId, RequestId)>)],
    replicates: usize,
    rng: &mut dyn RngCore,
) -> AttackSummary {
    assert!(!trials.is_empty() && replicates > 0);
    let t = trials.len() as f64;
    let attack_rate = trials
        .iter()
        .map(|(trace, truth)| recovered_rate(trace, &pairing_attack(trace), truth))
        .sum::<f64>()
        / t;
    let mut means: Vec<f64> = (0..replicates)
        .map(|_| {
            trials
                .iter()
                .map(|(trace, truth)| recovered_rate(trace, &random_pairing(trace, rng), truth))
                .sum::<f64>()
                / t
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (replicates - 1) as f64).round() as usize).min(replicates - 1)];
    let random_mean = means.iter().sum::<f64>() / replicates as f64;
    let above = means.iter().filter(|m| **m >= attack_rate).count() as f64;
    let below = means.iter().filter(|m| **m <= attack_rate).count() as f64;
    let r = replicates as f64;
    let p_value = (2.0 * ((above + 1.0) / (r + 1.0)).min((below + 1.0) / (r + 1.0))).min(1.0);
    AttackSummary {
        trials: trials.len(),
        attack_rate,
        random_mean,
        random_low: q(0.025),
        random_high: q(0.975),
        p_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn entry(seq: u64, text: &str) -> TraceEntry {
        TraceEntry {
            seq,
            request_id: RequestId::from_bytes([seq as u8; 16]),
            payload: Payload::Text(text.into()),
            probs: vec![0.5, 0.5],
        }
    }

    #[test]
    fn attack_recovers_exact_prefixes() {
        let trace = vec![
            entry(0, "a b [SEP] x y z"),
            entry(1, "c d"),
            entry(2, "a b"),
            entry(3, "c d [SEP] u v w q"),
        ];
        let guesses = pairing_attack(&trace);
        let truth: HashSet<_> = [
            (trace[0].request_id, trace[2].request_id),
            (trace[3].request_id, trace[1].request_id),
        ]
        .into_iter()
        .collect();
        assert_eq!(recovered_rate(&trace, &guesses, &truth), 1.0);
    }

    #[test]
    fn matchings_use_each_request_once() {
        let trace: Vec<_> = (0..12).map(|i| entry(i, &"t ".repeat(i as usize + 1))).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for guesses in [pairing_attack(&trace), random_pairing(&trace, &mut rng)] {
            let mut seen = HashSet::new();
            for (p, b) in guesses {
                assert!(trace[p].payload.token_count() > trace[b].payload.token_count());
                assert!(seen.insert(p) && seen.insert(b));
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let trace = vec![entry(0, "a b"), entry(1, "c")];
        write_trace_jsonl(&path, &trace).unwrap();
        assert_eq!(read_trace_jsonl(&path).unwrap(), trace);
    }
}
