use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use veil_core::analytics::{render_table, PrivacyReport};
use veil_core::backend::SyntheticConfig;
use veil_core::obfuscation::ReusePolicy;
use veil_harness::config::{BackendSpec, DatasetConfig, PprgMode, RunConfig};
use veil_harness::dataset::{Columns, DatasetFormat};
use veil_harness::pipeline::prepare;
use veil_harness::recipes::run_recipe;
use veil_harness::{run_protected_inference, HarnessError};
use veil_net::{serve, ServiceConfig};

#[derive(Parser)]
#[command(name = "veil", version, about = "Decision-private inference against black-box classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Obfuscator pools.
    Pool {
        #[command(subcommand)]
        action: PoolAction,
    },
    /// Run protected inference and write report, results and census.
    Infer(RunArgs),
    /// Run a named experiment sweep and write its CSV.
    Recipe {
        /// balancing_sweep, length_expansion, pprg_sweep or distribution_census
        name: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Serve the synthetic model over HTTP.
    ServeMock(ServeArgs),
    /// Reports.
    Report {
        #[command(subcommand)]
        action: ReportAction,
    },
}

#[derive(Subcommand)]
enum PoolAction {
    /// Classify candidates and save the filtered pool as JSON.
    Build {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Subcommand)]
enum ReportAction {
    /// Print report.json files as a table, one row per file.
    Render {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PprgArg {
    Off,
    Identity,
    Noisy,
    Plugin,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReuseArg {
    None,
    Full,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference settings: sst2, sst5, mrpc or qnli. Applied before --config.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "tsv")]
    format: String,
    /// Unlabeled obfuscator corpus: `.tsv` (id, text) or JSONL ({"id", "text"}).
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Prebuilt pool JSON.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// `synthetic` or the URL of a classify endpoint.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long, value_enum)]
    pprg: Option<PprgArg>,
    #[arg(long)]
    eta: Option<f64>,
    /// Encoder command for --pprg plugin, whitespace separated.
    #[arg(long)]
    plugin: Option<String>,
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    group_n: Option<usize>,
    #[arg(long)]
    expansion_k: Option<usize>,
    #[arg(long, value_enum)]
    reuse: Option<ReuseArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(p)) => RunConfig::preset(p)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(path) = &self.dataset {
            let format: DatasetFormat = self.format.parse()?;
            let columns = self.preset.as_deref().and_then(Columns::preset).unwrap_or_default();
            c.dataset = Some(DatasetConfig {
                path: path.clone(),
                format,
                columns,
            });
        }
        if let Some(path) = &self.candidates {
            c.pool.format = match path.extension().and_then(|e| e.to_str()) {
                Some("tsv") => DatasetFormat::Tsv,
                _ => DatasetFormat::Jsonl,
            };
            c.pool.candidates = Some(path.clone());
        }
        if self.pool.is_some() {
            c.pool.path = self.pool.clone();
        }
        match self.backend.as_deref() {
            None => {}
            Some("synthetic") => c.backend = BackendSpec::Synthetic,
            Some(url) => {
                c.backend = BackendSpec::Remote {
                    endpoint: url.to_owned(),
                    timeout_ms: 10_000,
                    max_retries: 3,
                    in_flight_cap: 16,
                }
            }
        }
        if let Some(m) = self.pprg {
            c.pprg.mode = match m {
                PprgArg::Off => PprgMode::Off,
                PprgArg::Identity => PprgMode::Identity,
                PprgArg::Noisy => PprgMode::Noisy,
                PprgArg::Plugin => PprgMode::Plugin,
            };
        }
        if let Some(cmd) = &self.plugin {
            c.pprg.plugin_command = cmd.split_whitespace().map(String::from).collect();
        }
        if let Some(r) = self.reuse {
            c.reuse = match r {
                ReuseArg::None => ReusePolicy::None,
                ReuseArg::Full => ReusePolicy::Full,
            };
        }
        c.pprg.eta = self.eta.unwrap_or(c.pprg.eta);
        c.min_confidence = self.min_confidence.unwrap_or(c.min_confidence);
        c.group_n = self.group_n.unwrap_or(c.group_n);
        c.expansion_k = self.expansion_k.unwrap_or(c.expansion_k);
        c.seed = self.seed.unwrap_or(c.seed);
        c.synthetic_data.instances = self.instances.unwrap_or(c.synthetic_data.instances);
        c.concurrency = self.concurrency.unwrap_or(c.concurrency);
        if self.output_dir.is_some() {
            c.output_dir = self.output_dir.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Model seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    label_count: usize,
    #[arg(long, default_value_t = 128)]
    max_sequence_length: usize,
    #[arg(long, default_value_t = 0.0)]
    latency_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    failure_rate: f64,
    #[arg(long, default_value_t = 4 << 20)]
    max_payload_bytes: usize,
    /// Append every observed request and response to this JSONL file.
    #[arg(long)]
    adversary_log: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Pool {
            action: PoolAction::Build { out, run },
        } => {
            let mut config = run.resolve()?;
            config.pool.path = None;
            let p = prepare(&config)?;
            let json = serde_json::to_string_pretty(&p.pool).expect("pool serializes");
            std::fs::write(&out, json).map_err(|e| HarnessError::io(&out, e))?;
            let sizes: Vec<usize> = (0..p.pool.label_count()).map(|l| p.pool.bucket(l).len()).collect();
            println!("pool of {} obfuscators per label {:?} -> {}", p.pool.len(), sizes, out.display());
        }
        Command::Infer(run) => {
            let config = run.resolve()?;
            let out = run_protected_inference(&config)?;
            if let Some(report) = &out.report {
                print!("{}", render_table(&[("protected".into(), report.clone())]));
                println!("epsilon {:.4}  requests {}  bounds [{}, {}]", report.epsilon_hat, out.request_count, out.cost_bounds.lower, out.cost_bounds.upper);
            } else {
                println!("{} instances resolved, {} requests", out.results.len(), out.request_count);
            }
            for f in &out.failures {
                eprintln!("failed {}: {}", f.instance_id, f.error);
            }
            match &config.output_dir {
                Some(dir) => println!("wrote {}", dir.display()),
                None => {
                    for r in &out.results {
                        println!("{}", serde_json::to_string(r).expect("result serializes"));
                    }
                }
            }
        }
        Command::Recipe { name, seeds, run } => {
            let config = run.resolve()?;
            let dir = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            let path = run_recipe(&name, &config, seeds, &dir)?;
            println!("wrote {}", path.display());
        }
        Command::ServeMock(args) => {
            let config = ServiceConfig {
                bind: args.bind,
                model: SyntheticConfig {
                    seed: args.seed,
                    label_count: args.label_count,
                    max_sequence_length: args.max_sequence_length,
                    ..SyntheticConfig::default()
                },
                latency_mean_ms: args.latency_ms,
                latency_jitter_ms: args.jitter_ms,
                failure_rate: args.failure_rate,
                max_payload_bytes: args.max_payload_bytes,
                adversary_log: false,
                adversary_log_path: args.adversary_log,
                chaos_seed: args.seed,
            };
            let handle = serve(config)?;
            println!("serving on {}", handle.classify_url());
            handle.wait();
        }
        Command::Report {
            action: ReportAction::Render { reports },
        } => {
            let mut rows = Vec::new();
            for path in reports {
                let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
                let value: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                let report: PrivacyReport = serde_json::from_value(value.get("report").cloned().unwrap_or(value))
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                let name = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
                rows.push((name, report));
            }
            print!("{}", render_table(&rows));
        }
    }
    Ok(())
}
