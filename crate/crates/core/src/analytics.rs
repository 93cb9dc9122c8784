//! Task and privacy metrics, decision censuses, attack combinatorics and
//! request-cost accounting.

use std::collections::HashMap;
use std::fmt::Write as _;

use num_bigint::BigUint;
use num_traits::One;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obfuscation::ReusePolicy;
use crate::types::{CorrelationLedger, DecisionDistribution, RequestId, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metric {
    Accuracy,
    /// F1 of the `positive` class; binary tasks only.
    BinaryF1 { positive: usize },
}

pub fn task_score(predictions: &[usize], golds: &[usize], metric: Metric) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Dimension {
            expected: golds.len(),
            actual: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    match metric {
        Metric::Accuracy => {
            let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
            Ok(hits as f64 / golds.len() as f64)
        }
        Metric::BinaryF1 { positive } => {
            if positive > 1 || predictions.iter().chain(golds).any(|l| *l > 1) {
                return Err(Error::Input("binary F1 needs labels in {0, 1}".into()));
            }
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (p, g) in predictions.iter().zip(golds) {
                match (*p == positive, *g == positive) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            if tp == 0 {
                return Ok(0.0);
            }
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fneg) as f64;
            Ok(2.0 * precision * recall / (precision + recall))
        }
    }
}

/// Relative loss of the resolved score against the unprotected baseline.
pub fn phi_r(t_baseline: f64, t_r: f64) -> Result<f64> {
    if t_baseline == 0.0 {
        return Err(Error::DivisionByZero("phi_r"));
    }
    Ok((t_baseline - t_r) / t_baseline)
}

/// Normalized distance of the obfuscated score from chance.
pub fn phi_o(t_o: f64, t_random: f64) -> Result<f64> {
    if t_random == 1.0 {
        return Err(Error::DivisionByZero("phi_o"));
    }
    Ok((t_o - t_random).abs() / (1.0 - t_random))
}

pub fn phi(phi_r: f64, phi_o: f64) -> f64 {
    (phi_r + phi_o) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensusScope {
    Pairs,
    Bares,
    All,
}

/// Empirical decision statistics over a set of responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionCensus {
    pub over: CensusScope,
    /// Argmax-label counts.
    pub histogram: Vec<u64>,
    /// Mean probability mass per label.
    pub per_label_mean: Vec<f64>,
}

impl DistributionCensus {
    /// A census known only by its decision counts, e.g. a published table.
    pub fn from_counts(over: CensusScope, histogram: Vec<u64>) -> Result<Self> {
        let total: u64 = histogram.iter().sum();
        if total == 0 {
            return Err(Error::EmptyCensus);
        }
        let per_label_mean = histogram.iter().map(|c| *c as f64 / total as f64).collect();
        Ok(Self {
            over,
            histogram,
            per_label_mean,
        })
    }

    pub fn population(&self) -> u64 {
        self.histogram.iter().sum()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let total = self.population() as f64;
        self.histogram.iter().map(|c| *c as f64 / total).collect()
    }
}

/// Tallies the responses whose ledger role falls within `scope`.
pub fn census(
    responses: &HashMap<RequestId, DecisionDistribution>,
    ledger: &CorrelationLedger,
    scope: CensusScope,
) -> Result<DistributionCensus> {
    let mut histogram: Vec<u64> = Vec::new();
    let mut mass: Vec<f64> = Vec::new();
    let mut population = 0u64;
    for id in ledger.request_ids() {
        let role = ledger.role_of(id).expect("id comes from the ledger");
        let included = match scope {
            CensusScope::All => true,
            CensusScope::Pairs => role == Role::ObfuscatedPair,
            CensusScope::Bares => role == Role::BareObfuscator,
        };
        if !included {
            continue;
        }
        let d = responses.get(id).ok_or_else(|| Error::IncompleteBatch { missing: vec![*id] })?;
        if histogram.is_empty() {
            histogram = vec![0; d.len()];
            mass = vec![0.0; d.len()];
        }
        if d.len() != histogram.len() {
            return Err(Error::Dimension {
                expected: histogram.len(),
                actual: d.len(),
            });
        }
        histogram[d.argmax()] += 1;
        mass.iter_mut().zip(d.probs()).for_each(|(m, p)| *m += p);
        population += 1;
    }
    if population == 0 {
        return Err(Error::EmptyCensus);
    }
    Ok(DistributionCensus {
        over: scope,
        histogram,
        per_label_mean: mass.into_iter().map(|m| m / population as f64).collect(),
    })
}

/// `max_i |Pr[y' = c_i] - 1/n|` from argmax-label frequencies.
pub fn epsilon_estimate(census: &DistributionCensus) -> Result<f64> {
    if census.population() == 0 {
        return Err(Error::EmptyCensus);
    }
    let uniform = 1.0 / census.histogram.len() as f64;
    Ok(census
        .frequencies()
        .into_iter()
        .map(|f| (f - uniform).abs())
        .fold(0.0, f64::max))
}

/// Exact `C(n, k)`.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 1..=k {
        // acc * (n - k + i) is divisible by i at every step
        acc = acc * BigUint::from(n - k + i) / BigUint::from(i);
    }
    acc
}

/// Number of `2mn`-subsets of `r` requests a blind adversary has to try to
/// hit one instance's full request set: `C(r, 2mn)`.
pub fn adversary_tries(r: u64, m: u64, n: u64) -> Result<BigUint> {
    let needed = 2 * m * n;
    if needed < 2 || r < needed {
        return Err(Error::Parameter(format!(
            "need r >= 2mn >= 2, got r = {r}, 2mn = {needed}"
        )));
    }
    Ok(binomial(r, needed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBounds {
    pub lower: u64,
    pub upper: u64,
}

/// Total request count for `k` instances: `(1 + kn)|C|` with full bare reuse,
/// `2kn|C|` without.
pub fn request_count(k_instances: u64, n: u64, label_count: u64, reuse: ReusePolicy) -> u64 {
    match reuse {
        ReusePolicy::Full => (1 + k_instances * n) * label_count,
        ReusePolicy::None => 2 * k_instances * n * label_count,
    }
}

pub fn request_cost_bounds(k_instances: u64, n: u64, label_count: u64) -> CostBounds {
    CostBounds {
        lower: request_count(k_instances, n, label_count, ReusePolicy::Full),
        upper: request_count(k_instances, n, label_count, ReusePolicy::None),
    }
}

/// Scores, privacy metrics and costs of one protected run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub t_r: f64,
    pub t_o: f64,
    pub t_baseline: f64,
    pub t_random: f64,
    pub phi_r: f64,
    pub phi_o: f64,
    pub phi: f64,
    pub epsilon_hat: f64,
    pub request_count: u64,
    pub cost_bounds: CostBounds,
}

impl PrivacyReport {
    pub fn new(
        t_r: f64,
        t_o: f64,
        t_baseline: f64,
        t_random: f64,
        epsilon_hat: f64,
        request_count: u64,
        cost_bounds: CostBounds,
    ) -> Result<Self> {
        let pr = phi_r(t_baseline, t_r)?;
        let po = phi_o(t_o, t_random)?;
        Ok(Self {
            t_r,
            t_o,
            t_baseline,
            t_random,
            phi_r: pr,
            phi_o: po,
            phi: phi(pr, po),
            epsilon_hat,
            request_count,
            cost_bounds,
        })
    }
}

/// Fixed-width text table: method, T_r, T_o, Phi_r, Phi_o, Phi.
pub fn render_table(rows: &[(String, PrivacyReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>6} {:>6} | {:>6} {:>6} {:>6}",
        "method", "T_r", "T_o", "Phi_r", "Phi_o", "Phi"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 38));
    for (method, r) in rows {
        let _ = writeln!(
            out,
            "{method:<width$} | {:>6.3} {:>6.3} | {:>6.3} {:>6.3} {:>6.3}",
            r.t_r, r.t_o, r.phi_r, r.phi_o, r.phi
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Couple;
    use proptest::prelude::*;

    #[test]
    fn task_scores() {
        assert_eq!(task_score(&[0, 1, 1], &[0, 1, 1], Metric::Accuracy).unwrap(), 1.0);
        let (p, g) = ([1, 0, 1, 1], [1, 1, 1, 0]);
        assert_eq!(task_score(&p, &g, Metric::Accuracy).unwrap(), 0.5);
        // tp = 2, fp = 1, fn = 1
        let f1 = task_score(&p, &g, Metric::BinaryF1 { positive: 1 }).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(task_score(&[0, 1], &[0], Metric::Accuracy).is_err());
        assert!(task_score(&[0, 2], &[0, 1], Metric::BinaryF1 { positive: 1 }).is_err());
    }

    #[test]
    fn phi_examples() {
        assert!((phi_r(0.924, 0.913).unwrap() - 0.0119).abs() < 1e-4);
        assert_eq!(phi_r(0.8, 0.8).unwrap(), 0.0);
        assert!((phi_r(0.860, 0.434).unwrap() - 0.4953).abs() < 1e-4);
        assert!(phi_r(0.0, 0.3).is_err());

        assert!((phi_o(0.770, 0.5).unwrap() - 0.540).abs() < 1e-12);
        assert_eq!(phi_o(0.5, 0.5).unwrap(), 0.0);
        assert!((phi_o(0.339, 0.2).unwrap() - 0.17375).abs() < 1e-12);
        assert!(phi_o(0.3, 1.0).is_err());

        assert!((phi(0.012, 0.540) - 0.276).abs() < 1e-12);
        assert_eq!(phi(0.0, 0.0), 0.0);
        assert!((phi(0.072, 0.296) - 0.184).abs() < 1e-12);
    }

    #[test]
    fn epsilon_examples() {
        let uniform = DistributionCensus::from_counts(CensusScope::All, vec![7, 7, 7]).unwrap();
        assert_eq!(epsilon_estimate(&uniform).unwrap(), 0.0);
        let k1 = DistributionCensus::from_counts(CensusScope::All, vec![465, 535]).unwrap();
        assert!((epsilon_estimate(&k1).unwrap() - 0.035).abs() < 1e-9);
        let k10 = DistributionCensus::from_counts(CensusScope::All, vec![501, 499]).unwrap();
        assert!((epsilon_estimate(&k10).unwrap() - 0.001).abs() < 1e-9);
        assert_eq!(DistributionCensus::from_counts(CensusScope::All, vec![0, 0]), Err(Error::EmptyCensus));
    }

    fn brute_force_subsets(n: u32, k: u32) -> u64 {
        (0u32..(1 << n)).filter(|m| m.count_ones() == k).count() as u64
    }

    fn pascal(n: usize, k: usize) -> BigUint {
        let mut row = vec![BigUint::one()];
        for _ in 0..n {
            let mut next = vec![BigUint::one(); row.len() + 1];
            for i in 1..row.len() {
                next[i] = &row[i - 1] + &row[i];
            }
            row = next;
        }
        row[k].clone()
    }

    #[test]
    fn adversary_tries_examples() {
        assert_eq!(adversary_tries(6, 3, 1).unwrap(), BigUint::one());
        assert_eq!(adversary_tries(10, 2, 1).unwrap(), BigUint::from(brute_force_subsets(10, 4)));
        assert_eq!(adversary_tries(10, 2, 1).unwrap(), BigUint::from(210u32));
        let hundred = adversary_tries(100, 3, 1).unwrap();
        assert_eq!(hundred, BigUint::from(1_192_052_400u64));
        assert_eq!(hundred, pascal(100, 6));
        assert!(hundred > BigUint::from(1_000_000_000u64));
        assert!(adversary_tries(5, 3, 1).is_err());
        assert!(adversary_tries(5, 0, 1).is_err());
        // big r stays exact
        assert_eq!(adversary_tries(300, 5, 2).unwrap(), pascal(300, 20));
    }

    #[test]
    fn cost_examples() {
        assert_eq!(request_count(1, 1, 2, ReusePolicy::None), 4);
        assert_eq!(request_cost_bounds(3, 1, 2), CostBounds { lower: 8, upper: 12 });
        assert_eq!(request_cost_bounds(1, 1, 2), CostBounds { lower: 4, upper: 4 });
    }

    fn d(p: &[f64]) -> DecisionDistribution {
        DecisionDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn census_scopes() {
        let id = |b: u8| RequestId::from_bytes([b; 16]);
        let mut ledger = CorrelationLedger::new(false);
        ledger
            .insert("x".into(), vec![Couple { pair: id(1), bare: id(2) }, Couple { pair: id(3), bare: id(4) }])
            .unwrap();
        let responses: HashMap<_, _> = [
            (id(1), d(&[0.6, 0.4])),
            (id(2), d(&[0.9, 0.1])),
            (id(3), d(&[0.3, 0.7])),
            (id(4), d(&[0.2, 0.8])),
        ]
        .into_iter()
        .collect();
        let bares = census(&responses, &ledger, CensusScope::Bares).unwrap();
        assert_eq!(bares.histogram, vec![1, 1]);
        assert_eq!(epsilon_estimate(&bares).unwrap(), 0.0);
        assert!((bares.per_label_mean[0] - 0.55).abs() < 1e-12);
        let all = census(&responses, &ledger, CensusScope::All).unwrap();
        assert_eq!(all.population(), 4);
        assert!((all.per_label_mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut one = CorrelationLedger::new(false);
        one.insert("y".into(), vec![Couple { pair: id(1), bare: id(2) }]).unwrap();
        let single = census(&responses, &one, CensusScope::Pairs).unwrap();
        assert_eq!(single.histogram, vec![1, 0]);
        assert_eq!(single.per_label_mean, vec![0.6, 0.4]);

        let mut missing = responses.clone();
        missing.remove(&id(4));
        assert!(census(&missing, &ledger, CensusScope::Bares).is_err());
    }

    #[test]
    fn report_and_table() {
        let r = PrivacyReport::new(0.913, 0.770, 0.924, 0.5, 0.035, 4, CostBounds { lower: 4, upper: 4 }).unwrap();
        assert!((r.phi - (r.phi_r + r.phi_o) / 2.0).abs() < 1e-15);
        let table = render_table(&[("ours".into(), r)]);
        assert!(table.contains("0.540"));
        assert!(table.lines().count() == 3);
    }

    proptest! {
        #[test]
        fn tries_ratio_identity(r in 2u64..400, m in 1u64..4, n in 1u64..3) {
            let needed = 2 * m * n;
            prop_assume!(r >= needed);
            let a = adversary_tries(r, m, n).unwrap();
            let b = adversary_tries(r + 1, m, n).unwrap();
            prop_assert!(b > a);
            prop_assert_eq!(&b * BigUint::from(r + 1 - needed), &a * BigUint::from(r + 1));
        }

        #[test]
        fn bounds_ordered(k in 1u64..50, n in 1u64..6, c in 2u64..6) {
            let b = request_cost_bounds(k, n, c);
            prop_assert!(b.lower <= b.upper);
            prop_assert_eq!(b.lower == b.upper, k == 1 && n == 1);
        }

        #[test]
        fn epsilon_zero_iff_uniform_and_monotone(counts in proptest::collection::vec(0u64..50, 2..6)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let c = DistributionCensus::from_counts(CensusScope::All, counts.clone()).unwrap();
            let eps = epsilon_estimate(&c).unwrap();
            let uniform = counts.iter().all(|x| *x == counts[0]);
            prop_assert_eq!(eps == 0.0, uniform);
            // moving one decision from the least to the most frequent label
            // pushes the census further from uniform
            let lo = (0..counts.len()).min_by_key(|i| counts[*i]).unwrap();
            let hi = (0..counts.len()).max_by_key(|i| counts[*i]).unwrap();
            if counts[lo] > 0 && lo != hi {
                let mut moved = counts.clone();
                moved[lo] -= 1;
                moved[hi] += 1;
                let c2 = DistributionCensus::from_counts(CensusScope::All, moved).unwrap();
                prop_assert!(epsilon_estimate(&c2).unwrap() >= eps);
            }
        }
    }
}
