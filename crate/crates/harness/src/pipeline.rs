//! End-to-end protected inference: pool, grouping, obfuscation, encoding,
//! scheduling, dispatch, resolution and analytics.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use veil_core::analytics::{
    census, epsilon_estimate, request_cost_bounds, task_score, CensusScope, CostBounds, DistributionCensus, Metric,
    PrivacyReport,
};
use veil_core::backend::{ModelBackend, SyntheticLexiconModel};
use veil_core::obfuscation::{
    build_pool, obfuscate_with, sample_group, sample_unbalanced, schedule, ConcatPolicy, InstancePlan, ObfuscatorPool,
    PlannedCouple, ReusePolicy,
};
use veil_core::pprg::{IdentityEmbedding, NoisyEmbedding, PerturbationParams, Pprg};
use veil_core::resolution::{gather_couples, resolve, resolve_unbalanced, ResolutionResult};
use veil_core::streams::{item_rng, substream, Stream};
use veil_core::{
    CorrelationLedger, DecisionDistribution, Instance, InstanceId, LabelSet, Obfuscator, Payload, RequestId,
    RequestRecord,
};
use veil_net::{RemoteBackend, RemoteConfig};

use crate::config::{BackendSpec, PprgMode, RunConfig, Sampling, API_KEY_ENV};
use crate::dataset::{ingest, ingest_candidates};
use crate::error::HarnessError;
use crate::plugin::PluginPprg;

/// Per-run settings of the protection stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtectParams {
    pub seed: u64,
    pub group_n: usize,
    pub expansion_k: usize,
    pub sampling: Sampling,
    pub reuse: ReusePolicy,
    pub metric: Metric,
    pub baseline: bool,
    pub concurrency: usize,
}

impl ProtectParams {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            seed: c.seed,
            group_n: c.group_n,
            expansion_k: c.expansion_k,
            sampling: c.sampling,
            reuse: c.reuse,
            metric: c.metric,
            baseline: c.baseline,
            concurrency: c.concurrency,
        }
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance_id: InstanceId,
    pub label: usize,
    pub diff_scores: Vec<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance_id: InstanceId,
    pub error: String,
}

/// Task scores of one run. Present when every instance has a gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub t_r: f64,
    pub t_o: f64,
    pub t_random: f64,
    /// Plain `x` sent to the backend.
    pub t_baseline: Option<f64>,
    /// Encoded `x` alone, without obfuscation.
    pub t_pprg: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutput {
    pub report: Option<PrivacyReport>,
    pub scores: Option<Scores>,
    pub results: Vec<InstanceResult>,
    pub failures: Vec<InstanceFailure>,
    pub censuses: Vec<DistributionCensus>,
    pub request_count: u64,
    pub cost_bounds: CostBounds,
    /// Client-private; never written to disk by the harness.
    #[serde(skip)]
    pub ledger: CorrelationLedger,
}

impl RunOutput {
    pub fn census(&self, scope: CensusScope) -> Option<&DistributionCensus> {
        self.censuses.iter().find(|c| c.over == scope)
    }

    pub fn epsilon(&self, scope: CensusScope) -> Option<f64> {
        self.census(scope).and_then(|c| epsilon_estimate(c).ok())
    }
}

/// Random-guess score under `metric` for the given gold labels.
pub fn random_score(golds: &[usize], label_count: usize, metric: Metric) -> f64 {
    match metric {
        Metric::Accuracy => 1.0 / label_count as f64,
        Metric::BinaryF1 { positive } => {
            // uniform guessing: precision = share of positives, recall = 1/2
            let p = golds.iter().filter(|g| **g == positive).count() as f64 / golds.len().max(1) as f64;
            if p == 0.0 {
                0.0
            } else {
                p / (p + 0.5)
            }
        }
    }
}

/// Sends every record with at most `concurrency` requests in flight.
pub fn dispatch(
    records: &[RequestRecord],
    backend: &dyn ModelBackend,
    concurrency: usize,
) -> (HashMap<RequestId, DecisionDistribution>, HashMap<RequestId, String>) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .expect("dispatch thread pool");
    let outcomes: Vec<_> = pool.install(|| {
        records
            .par_iter()
            .map(|r| (r.request_id, backend.classify_request(&r.wire())))
            .collect()
    });
    let mut ok = HashMap::with_capacity(outcomes.len());
    let mut failed = HashMap::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(d) => {
                ok.insert(id, d);
            }
            Err(e) => {
                failed.insert(id, e.to_string());
            }
        }
    }
    (ok, failed)
}

fn encode(text: &str, pprg: Option<&dyn Pprg>, seed: u64, index: &mut u64) -> veil_core::Result<Payload> {
    let Some(p) = pprg else {
        return Ok(Payload::Text(text.to_owned()));
    };
    let mut rng = item_rng(seed, Stream::Pprg, *index);
    *index += 1;
    Ok(Payload::Encoded(p.encode(text, &mut rng)?))
}

/// Runs protected inference of `instances` against `backend`.
pub fn protect(
    backend: &dyn ModelBackend,
    instances: &[Instance],
    pool: &ObfuscatorPool,
    pprg: Option<&dyn Pprg>,
    params: &ProtectParams,
) -> Result<RunOutput, HarnessError> {
    let labels = backend.label_set().len();
    if pool.label_count() != labels {
        return Err(HarnessError::Config(format!(
            "pool covers {} labels, backend has {labels}",
            pool.label_count()
        )));
    }
    if instances.is_empty() {
        return Err(HarnessError::Config("no instances".into()));
    }
    let policy = ConcatPolicy::for_backend(backend);
    let mut grouping = substream(params.seed, Stream::Grouping);
    let mut encode_index = 0u64;
    let mut bare_cache: HashMap<String, Payload> = HashMap::new();
    let mut plans = Vec::with_capacity(instances.len());
    for x in instances {
        let obfuscators: Vec<Obfuscator> = match params.sampling {
            Sampling::Balanced => sample_group(pool, params.group_n, &mut grouping)?
                .into_iter()
                .flat_map(|g| g.members().to_vec())
                .collect(),
            Sampling::Random { count } => sample_unbalanced(pool, count, &mut grouping)?,
        };
        let mut couples = Vec::with_capacity(obfuscators.len());
        for c in obfuscate_with(x, &obfuscators, params.expansion_k, &policy) {
            let paired = encode(&c.paired, pprg, params.seed, &mut encode_index)?;
            let bare = match bare_cache.get(&c.bare) {
                Some(p) if params.reuse == ReusePolicy::Full => p.clone(),
                _ => {
                    let p = encode(&c.bare, pprg, params.seed, &mut encode_index)?;
                    if params.reuse == ReusePolicy::Full {
                        bare_cache.insert(c.bare.clone(), p.clone());
                    }
                    p
                }
            };
            couples.push(PlannedCouple {
                bare_key: c.bare,
                paired,
                bare,
            });
        }
        plans.push(InstancePlan {
            instance_id: x.id.clone(),
            couples,
        });
    }
    let batch = schedule(plans, params.reuse, &mut substream(params.seed, Stream::Shuffle))?;
    let (responses, failed) = dispatch(&batch.records, backend, params.concurrency);

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut resolved: HashMap<&InstanceId, usize> = HashMap::new();
    for (id, couples) in batch.ledger.iter() {
        let outcome = gather_couples(id, &responses, &batch.ledger).and_then(|observed| match params.sampling {
            Sampling::Balanced => resolve(&observed, params.group_n),
            Sampling::Random { .. } => resolve_unbalanced(&observed),
        });
        match outcome {
            Ok(ResolutionResult {
                label,
                diff_scores,
                margin,
            }) => {
                resolved.insert(id, label);
                results.push(InstanceResult {
                    instance_id: id.clone(),
                    label,
                    diff_scores,
                    margin,
                });
            }
            Err(e) => {
                let cause: Vec<&str> = couples
                    .iter()
                    .flat_map(|c| [c.pair, c.bare])
                    .filter_map(|r| failed.get(&r).map(String::as_str))
                    .collect();
                let error = match cause.first() {
                    Some(first) => format!("{e} ({first})"),
                    None => e.to_string(),
                };
                failures.push(InstanceFailure {
                    instance_id: id.clone(),
                    error,
                });
            }
        }
    }

    let k = instances.len() as u64;
    let cost_bounds = match params.sampling {
        Sampling::Balanced => request_cost_bounds(k, params.group_n as u64, labels as u64),
        Sampling::Random { count } => CostBounds {
            lower: (1 + k) * count as u64,
            upper: 2 * k * count as u64,
        },
    };
    let request_count = batch.records.len() as u64;

    let mut censuses = Vec::new();
    if failures.is_empty() {
        for scope in [CensusScope::Pairs, CensusScope::Bares, CensusScope::All] {
            censuses.push(census(&responses, &batch.ledger, scope)?);
        }
    }

    let golds: Option<Vec<usize>> = instances.iter().map(|x| x.gold_label).collect();
    let scores = match golds {
        Some(golds) if failures.is_empty() => {
            let gold_of: HashMap<&InstanceId, usize> = instances.iter().map(|x| &x.id).zip(golds.iter().copied()).collect();
            let (mut pred_r, mut gold_r) = (Vec::new(), Vec::new());
            let (mut pred_o, mut gold_o) = (Vec::new(), Vec::new());
            for (id, couples) in batch.ledger.iter() {
                let g = gold_of[id];
                pred_r.push(resolved[id]);
                gold_r.push(g);
                for c in couples {
                    pred_o.push(responses[&c.pair].argmax());
                    gold_o.push(g);
                }
            }
            let t_baseline = if params.baseline {
                let preds = instances
                    .par_iter()
                    .map(|x| backend.classify_text(&x.text).map(|d| d.argmax()))
                    .collect::<Result<Vec<_>, _>>()?;
                Some(task_score(&preds, &golds, params.metric)?)
            } else {
                None
            };
            let t_pprg = match (pprg, params.baseline) {
                (Some(p), true) => {
                    let preds = instances
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            let mut rng = item_rng(params.seed, Stream::Pprg, u64::MAX - i as u64);
                            let rep = p.encode(&x.text, &mut rng)?;
                            backend.classify(&Payload::Encoded(rep)).map(|d| d.argmax())
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    Some(task_score(&preds, &golds, params.metric)?)
                }
                _ => None,
            };
            Some(Scores {
                t_r: task_score(&pred_r, &gold_r, params.metric)?,
                t_o: task_score(&pred_o, &gold_o, params.metric)?,
                t_random: random_score(&golds, labels, params.metric),
                t_baseline,
                t_pprg,
            })
        }
        _ => None,
    };

    let report = match (&scores, censuses.iter().find(|c| c.over == CensusScope::All)) {
        (Some(s), Some(all)) => match s.t_baseline {
            Some(tb) => Some(PrivacyReport::new(
                s.t_r,
                s.t_o,
                tb,
                s.t_random,
                epsilon_estimate(all)?,
                request_count,
                cost_bounds,
            )?),
            None => None,
        },
        _ => None,
    };

    Ok(RunOutput {
        report,
        scores,
        results,
        failures,
        censuses,
        request_count,
        cost_bounds,
        ledger: batch.ledger,
    })
}

/// Everything a run needs besides the protection parameters.
pub struct Prepared {
    pub backend: Arc<dyn ModelBackend>,
    /// Local copy of the synthetic model; generates data and fixes the
    /// public token embedding.
    pub generator: Arc<SyntheticLexiconModel>,
    pub instances: Vec<Instance>,
    pub pool: ObfuscatorPool,
    pub pprg: Option<Box<dyn Pprg>>,
}

pub fn make_backend(config: &RunConfig, generator: &Arc<SyntheticLexiconModel>) -> Result<Arc<dyn ModelBackend>, HarnessError> {
    Ok(match &config.backend {
        BackendSpec::Synthetic => generator.clone(),
        BackendSpec::Remote {
            endpoint,
            timeout_ms,
            max_retries,
            in_flight_cap,
        } => {
            let remote = RemoteConfig {
                endpoint: endpoint.clone(),
                timeout_ms: *timeout_ms,
                max_retries: *max_retries,
                in_flight_cap: *in_flight_cap,
                api_key: std::env::var(API_KEY_ENV).ok(),
                ..RemoteConfig::default()
            };
            let labels = LabelSet::new(config.label_names())?;
            Arc::new(RemoteBackend::new(remote, labels, config.model.max_sequence_length)?)
        }
    })
}

pub fn make_pprg(config: &RunConfig, generator: &SyntheticLexiconModel) -> Result<Option<Box<dyn Pprg>>, HarnessError> {
    let key = generator.embedding_key();
    let dim = generator.embedding_dim();
    Ok(match config.pprg.mode {
        PprgMode::Off => None,
        PprgMode::Identity => Some(Box::new(IdentityEmbedding { key, dim })),
        PprgMode::Noisy => {
            let params = PerturbationParams {
                eta: config.pprg.eta,
                gamma_shape: config.pprg.gamma_shape,
            };
            params.validate()?;
            Some(Box::new(NoisyEmbedding { key, dim, params }))
        }
        PprgMode::Plugin => Some(Box::new(PluginPprg::new(config.pprg.plugin_command.clone(), dim)?)),
    })
}

pub fn load_instances(config: &RunConfig, generator: &SyntheticLexiconModel, separator: &str) -> Result<Vec<Instance>, HarnessError> {
    match &config.dataset {
        Some(d) => ingest(&d.path, d.format, &d.columns, &LabelSet::new(config.label_names())?, separator),
        None => Ok(generator.generate_instances(
            "x",
            config.synthetic_data.instances,
            &config.synthetic_data.instance_profile,
            &mut substream(config.seed, Stream::Data),
        )),
    }
}

pub fn load_pool(config: &RunConfig, generator: &SyntheticLexiconModel, backend: &dyn ModelBackend) -> Result<ObfuscatorPool, HarnessError> {
    if let Some(path) = &config.pool.path {
        let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
        let pool: ObfuscatorPool = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if pool.backend_fingerprint() != backend.fingerprint() {
            return Err(HarnessError::Config(format!(
                "pool was built against {}, backend is {}",
                pool.backend_fingerprint(),
                backend.fingerprint()
            )));
        }
        return Ok(pool);
    }
    let candidates = match &config.pool.candidates {
        Some(path) => ingest_candidates(path, config.pool.format, backend.separator())?,
        None => generator.generate_instances(
            "b",
            config.synthetic_data.candidates,
            &config.synthetic_data.candidate_profile,
            &mut substream(config.seed, Stream::Pool),
        ),
    };
    Ok(build_pool(&candidates, backend, config.min_confidence)?)
}

pub fn prepare(config: &RunConfig) -> Result<Prepared, HarnessError> {
    config.validate()?;
    let generator = Arc::new(SyntheticLexiconModel::new(config.model.clone())?);
    let backend = make_backend(config, &generator)?;
    let instances = load_instances(config, &generator, backend.separator())?;
    let pool = load_pool(config, &generator, backend.as_ref())?;
    let pprg = make_pprg(config, &generator)?;
    Ok(Prepared {
        backend,
        generator,
        instances,
        pool,
        pprg,
    })
}

pub fn run_protected_inference(config: &RunConfig) -> Result<RunOutput, HarnessError> {
    let p = prepare(config)?;
    let out = protect(
        p.backend.as_ref(),
        &p.instances,
        &p.pool,
        p.pprg.as_deref(),
        &ProtectParams::from_config(config),
    )?;
    if let Some(dir) = &config.output_dir {
        write_outputs(&out, dir)?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    report: &'a Option<PrivacyReport>,
    scores: &'a Option<Scores>,
    request_count: u64,
    cost_bounds: CostBounds,
    failures: &'a [InstanceFailure],
}

/// Writes `report.json`, `results.jsonl` and `census.csv` into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    fn io(p: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
        move |e| HarnessError::io(p, e)
    }

    let path = dir.join("report.json");
    let body = serde_json::to_string_pretty(&ReportFile {
        report: &out.report,
        scores: &out.scores,
        request_count: out.request_count,
        cost_bounds: out.cost_bounds,
        failures: &out.failures,
    })
    .expect("report serializes");
    std::fs::write(&path, body + "\n").map_err(io(&path))?;

    let path = dir.join("results.jsonl");
    let mut w = BufWriter::new(File::create(&path).map_err(io(&path))?);
    for r in &out.results {
        let line = serde_json::to_string(r).expect("result serializes");
        writeln!(w, "{line}").map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join("census.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::io(&path, e.into()))?;
    let csv_err = |e: csv::Error| HarnessError::io(&path, e.into());
    w.write_record(["scope", "label", "count", "frequency", "mean_prob", "epsilon"]).map_err(csv_err)?;
    for c in &out.censuses {
        let eps = epsilon_estimate(c)?;
        for (label, (count, freq)) in c.histogram.iter().zip(c.frequencies()).enumerate() {
            w.write_record([
                scope_name(c.over).to_string(),
                label.to_string(),
                count.to_string(),
                format!("{freq:.6}"),
                format!("{:.6}", c.per_label_mean[label]),
                format!("{eps:.6}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io(&path))?;
    Ok(())
}

pub fn scope_name(scope: CensusScope) -> &'static str {
    match scope {
        CensusScope::Pairs => "pairs",
        CensusScope::Bares => "bares",
        CensusScope::All => "all",
    }
}
