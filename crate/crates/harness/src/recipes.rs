//! Parameter sweeps emitting CSV tables.

use std::path::{Path, PathBuf};

use serde::Serialize;
use veil_core::analytics::{epsilon_estimate, CensusScope};
use veil_core::pprg::{IdentityEmbedding, NoisyEmbedding, PerturbationParams, Pprg};

use crate::config::{RunConfig, Sampling};
use crate::error::HarnessError;
use crate::pipeline::{prepare, protect, scope_name, Prepared, ProtectParams, RunOutput};

pub const RECIPES: [&str; 4] = ["balancing_sweep", "length_expansion", "pprg_sweep", "distribution_census"];

pub const PPRG_ETAS: [f64; 4] = [200.0, 100.0, 50.0, 25.0];
pub const CENSUS_KS: [usize; 3] = [1, 5, 10];

fn seeds(base: &RunConfig, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.seed.wrapping_add(i)).collect()
}

fn with_seed(base: &RunConfig, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        baseline: false,
        ..base.clone()
    }
}

fn scored(out: &RunOutput) -> Result<(f64, f64), HarnessError> {
    match &out.scores {
        Some(s) => Ok((s.t_r, s.t_o)),
        None => Err(HarnessError::Config(format!(
            "run has no scores ({} failed instances or unlabeled data)",
            out.failures.len()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalancingRow {
    pub seed: u64,
    pub sampling: &'static str,
    /// Group count for balanced rows, obfuscator count for random rows.
    pub size: usize,
    pub obfuscators: usize,
    pub t_r: f64,
    pub t_o: f64,
}

/// Balanced groups `n = 1..=max_n` against random draws of `1..=max_n*|C|`
/// obfuscators, per seed.
pub fn balancing_sweep(base: &RunConfig, seed_count: usize, max_n: usize) -> Result<Vec<BalancingRow>, HarnessError> {
    let mut rows = Vec::new();
    for seed in seeds(base, seed_count) {
        let config = with_seed(base, seed);
        let p = prepare(&config)?;
        let labels = p.backend.label_set().len();
        for n in 1..=max_n {
            let params = ProtectParams {
                group_n: n,
                sampling: Sampling::Balanced,
                ..ProtectParams::from_config(&config)
            };
            let (t_r, t_o) = scored(&run(&p, &params)?)?;
            rows.push(BalancingRow {
                seed,
                sampling: "balanced",
                size: n,
                obfuscators: n * labels,
                t_r,
                t_o,
            });
        }
        for count in 1..=max_n * labels {
            let params = ProtectParams {
                sampling: Sampling::Random { count },
                ..ProtectParams::from_config(&config)
            };
            let (t_r, t_o) = scored(&run(&p, &params)?)?;
            rows.push(BalancingRow {
                seed,
                sampling: "random",
                size: count,
                obfuscators: count,
                t_r,
                t_o,
            });
        }
    }
    Ok(rows)
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// Mean over sweep points of the across-seed variance of `t_r`, restricted
/// to points with the given obfuscator counts when `at` is set.
pub fn mean_seed_variance(rows: &[BalancingRow], sampling: &str, at: Option<&[usize]>) -> f64 {
    let mut points: Vec<usize> = rows
        .iter()
        .filter(|r| r.sampling == sampling)
        .map(|r| r.obfuscators)
        .filter(|o| at.is_none_or(|a| a.contains(o)))
        .collect();
    points.sort_unstable();
    points.dedup();
    let vars: Vec<f64> = points
        .iter()
        .map(|p| {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.sampling == sampling && r.obfuscators == *p)
                .map(|r| r.t_r)
                .collect();
            variance(&xs)
        })
        .collect();
    vars.iter().sum::<f64>() / vars.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthRow {
    pub seed: u64,
    pub k: usize,
    pub t_r: f64,
    pub t_o: f64,
    pub epsilon_all: f64,
    pub epsilon_pairs: f64,
}

pub fn length_expansion(base: &RunConfig, seed_count: usize, ks: &[usize]) -> Result<Vec<LengthRow>, HarnessError> {
    let mut rows = Vec::new();
    for seed in seeds(base, seed_count) {
        let config = with_seed(base, seed);
        let p = prepare(&config)?;
        for &k in ks {
            let params = ProtectParams {
                expansion_k: k,
                ..ProtectParams::from_config(&config)
            };
            let out = run(&p, &params)?;
            let (t_r, t_o) = scored(&out)?;
            rows.push(LengthRow {
                seed,
                k,
                t_r,
                t_o,
                epsilon_all: out.epsilon(CensusScope::All).unwrap_or(f64::NAN),
                epsilon_pairs: out.epsilon(CensusScope::Pairs).unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PprgRow {
    pub seed: u64,
    pub encoder: String,
    pub eta: Option<f64>,
    /// Encoded `x` alone.
    pub t_pprg: f64,
    pub t_r: f64,
    pub t_o: f64,
}

/// Noisy encoders at each `eta`, plus the noiseless identity encoder.
pub fn pprg_sweep(base: &RunConfig, seed_count: usize, etas: &[f64]) -> Result<Vec<PprgRow>, HarnessError> {
    let mut rows = Vec::new();
    for seed in seeds(base, seed_count) {
        let config = RunConfig {
            baseline: true,
            ..with_seed(base, seed)
        };
        let p = prepare(&config)?;
        let key = p.generator.embedding_key();
        let dim = p.generator.embedding_dim();
        let mut encoders: Vec<(String, Option<f64>, Box<dyn Pprg>)> =
            vec![("identity".into(), None, Box::new(IdentityEmbedding { key, dim }))];
        for &eta in etas {
            let params = PerturbationParams {
                eta,
                gamma_shape: config.pprg.gamma_shape,
            };
            params.validate()?;
            encoders.push((format!("eta={eta}"), Some(eta), Box::new(NoisyEmbedding { key, dim, params })));
        }
        for (name, eta, encoder) in encoders {
            let out = protect(
                p.backend.as_ref(),
                &p.instances,
                &p.pool,
                Some(encoder.as_ref()),
                &ProtectParams::from_config(&config),
            )?;
            let (t_r, t_o) = scored(&out)?;
            rows.push(PprgRow {
                seed,
                encoder: name,
                eta,
                t_pprg: out.scores.as_ref().and_then(|s| s.t_pprg).unwrap_or(f64::NAN),
                t_r,
                t_o,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CensusRow {
    pub k: usize,
    pub scope: &'static str,
    pub label: usize,
    pub count: u64,
    pub frequency: f64,
    pub mean_prob: f64,
    pub epsilon: f64,
}

pub fn distribution_census(base: &RunConfig, ks: &[usize]) -> Result<Vec<CensusRow>, HarnessError> {
    let config = with_seed(base, base.seed);
    let p = prepare(&config)?;
    let mut rows = Vec::new();
    for &k in ks {
        let params = ProtectParams {
            expansion_k: k,
            ..ProtectParams::from_config(&config)
        };
        let out = run(&p, &params)?;
        for c in &out.censuses {
            let epsilon = epsilon_estimate(c)?;
            for (label, (count, frequency)) in c.histogram.iter().zip(c.frequencies()).enumerate() {
                rows.push(CensusRow {
                    k,
                    scope: scope_name(c.over),
                    label,
                    count: *count,
                    frequency,
                    mean_prob: c.per_label_mean[label],
                    epsilon,
                });
            }
        }
    }
    Ok(rows)
}

fn run(p: &Prepared, params: &ProtectParams) -> Result<RunOutput, HarnessError> {
    protect(p.backend.as_ref(), &p.instances, &p.pool, p.pprg.as_deref(), params)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// Runs a named recipe and writes `<name>.csv` into `dir`.
pub fn run_recipe(name: &str, base: &RunConfig, seed_count: usize, dir: &Path) -> Result<PathBuf, HarnessError> {
    if !RECIPES.contains(&name) {
        return Err(HarnessError::UnknownRecipe(name.to_owned()));
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(format!("{name}.csv"));
    match name {
        "balancing_sweep" => write_csv(&path, &balancing_sweep(base, seed_count, 5)?)?,
        "length_expansion" => write_csv(&path, &length_expansion(base, seed_count, &(1..=10).collect::<Vec<_>>())?)?,
        "pprg_sweep" => write_csv(&path, &pprg_sweep(base, seed_count, &PPRG_ETAS)?)?,
        "distribution_census" => write_csv(&path, &distribution_census(base, &CENSUS_KS)?)?,
        _ => unreachable!("checked above"),
    }
    Ok(path)
}
