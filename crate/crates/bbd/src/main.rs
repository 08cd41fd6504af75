use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use bbd::cache_io::{self, WriteOutcome};
use bbd::config::RunConfig;
use bbd::core::blackbox::Vocabulary;
use bbd::core::metrics;
use bbd::core::trainer::Strategy;
use bbd::{checkpoint, dataset, http, pipeline, reports, Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bbd", version, about = "Black-box distillation with attention-guided scale selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Precompute attention maps of the training split at every scale.
    AttnCache {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Serve the simulated API over HTTP.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Per-class IoU of raw API answers at every scale.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        api: Option<String>,
    },
    /// Train the student; writes the log and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        job: Job,
    },
    /// Score a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per gate threshold and score each run.
    AblateTau {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        job: Job,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        taus: Vec<f64>,
    },
    /// Rank correlation of attention entropy with answer quality.
    Correlate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        crops: usize,
    },
}

#[derive(Args)]
struct Job {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    api: Option<String>,
    /// atgc, naive, random, average, oracle, supervised or fixed.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    fixed_scale: Option<f64>,
}

impl Job {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = &self.strategy {
            cfg.train.strategy = match (s.to_ascii_lowercase().as_str(), self.fixed_scale) {
                ("fixed", Some(v)) => Strategy::Fixed(v),
                (_, Some(_)) => return Err(Error::Config("--fixed-scale needs --strategy fixed".into())),
                _ => s.parse().map_err(Error::Config)?,
            };
        } else if let Some(v) = self.fixed_scale {
            match cfg.train.strategy {
                Strategy::Fixed(_) => cfg.train.strategy = Strategy::Fixed(v),
                _ => return Err(Error::Config("--fixed-scale needs --strategy fixed".into())),
            }
        }
        if let Some(t) = self.tau {
            cfg.train.tau = t;
        }
        cfg.validate()
    }
}

fn prepare(out: &Path, cfg: &RunConfig, inputs: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    reports::write(out, "config.json", &cfg.to_json())?;
    let mut inputs = inputs;
    inputs["config_hash"] = pipeline::config_hash(cfg).into();
    reports::write(out, "inputs.json", &serde_json::to_string_pretty(&inputs)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            let ds = dataset::write_dataset(&common.out, &cfg.world)?;
            cfg.world = ds.config.clone();
            reports::write(&common.out, "config.json", &cfg.to_json())?;
            println!("wrote {} scenes to {} (hash {})", ds.store.len(), common.out.display(), ds.hash);
        }
        Command::AttnCache { common, data } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let scales = cfg.scale_set()?;
            let ds = dataset::read_dataset(&data)?;
            if let Ok(m) = cache_io::read_manifest(&common.out) {
                if m.dataset_hash == ds.hash && cache_io::read_cache(&common.out, &cfg.encoder, &scales, &ds.hash).is_ok() {
                    println!("cache at {} is up to date", common.out.display());
                    return Ok(());
                }
            }
            let cache = pipeline::build_cache(&ds.store, &cfg, &scales, &ds.hash)?;
            let outcome = cache_io::write_cache(&common.out, &cache, &ds.hash)?;
            reports::write(&common.out, "config.json", &cfg.to_json())?;
            let verb = if outcome == WriteOutcome::Written { "wrote" } else { "kept" };
            println!("{verb} {} maps in {}", cache.len(), common.out.display());
        }
        Command::Serve { config, port, host } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let addr: SocketAddr =
                format!("{host}:{port}").parse().map_err(|e| Error::Config(format!("bad address: {e}")))?;
            http::serve_forever(Arc::new(pipeline::blackbox(&cfg)), addr)?;
        }
        Command::Sweep { common, data, api } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let scales = cfg.scale_set()?;
            let ds = pipeline::dataset(&cfg, data.as_deref())?;
            prepare(&common.out, &cfg, serde_json::json!({ "dataset_hash": ds.hash }))?;
            let client = pipeline::client(&cfg, api.as_deref());
            let voc = Vocabulary::from_profiles(&ds.config.profiles);
            let report = metrics::sweep(&ds.store, &client, &scales, &voc).map_err(metrics_error)?;
            reports::write(&common.out, "sweep.csv", &reports::sweep_csv(&report, &ds.config.profiles))?;
        }
        Command::Train { common, job } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            job.apply(&mut cfg)?;
            let (m, rate) = train_once(&cfg, &job, &common.out, true)?;
            println!("{}: mIoU {:.2}, pass rate {:.3}", cfg.train.strategy, 100.0 * m, rate);
        }
        Command::Eval { checkpoint: ckpt, data, out } => {
            let ds = dataset::read_dataset(&data)?;
            let (header, decoder) = checkpoint::load(&ckpt)?;
            if header.k != ds.config.num_classes() {
                return Err(Error::Config(format!("checkpoint has {} classes, dataset {}", header.k, ds.config.num_classes())));
            }
            std::fs::create_dir_all(&out).map_err(Error::io(&out))?;
            let inputs = serde_json::json!({ "dataset_hash": ds.hash, "checkpoint": header });
            reports::write(&out, "inputs.json", &serde_json::to_string_pretty(&inputs)?)?;
            let cm = pipeline::evaluate(&decoder, &ds.store)?;
            reports::write(&out, "eval.csv", &reports::eval_csv(&cm, &ds.config.profiles))?;
            println!("mIoU {:.2}", 100.0 * cm.miou().unwrap_or(0.0));
        }
        Command::AblateTau { common, job, taus } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            job.apply(&mut cfg)?;
            prepare(&common.out, &cfg, serde_json::json!({ "taus": taus }))?;
            let mut rows = Vec::with_capacity(taus.len());
            for &tau in &taus {
                let mut c = cfg.clone();
                c.train.tau = tau;
                c.validate()?;
                let (m, rate) = train_once(&c, &job, &common.out.join(format!("tau_{tau}")), false)?;
                println!("tau {tau}: mIoU {:.2}", 100.0 * m);
                rows.push((tau, m, rate));
            }
            reports::write(&common.out, "ablate_tau.csv", &reports::ablation_csv(&rows))?;
        }
        Command::Correlate { common, data, cache, crops } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let scales = cfg.scale_set()?;
            let ds = pipeline::dataset(&cfg, data.as_deref())?;
            let cache = pipeline::cache(&cfg, &ds, &scales, cache.as_deref())?;
            prepare(&common.out, &cfg, serde_json::json!({ "dataset_hash": ds.hash }))?;
            let client = pipeline::client(&cfg, None);
            let voc = Vocabulary::from_profiles(&ds.config.profiles);
            let rows = metrics::entropy_quality_correlation(
                &ds.store,
                &cache,
                &client,
                &voc,
                cfg.train.crop_size,
                crops,
                cfg.train.seed,
            )
            .map_err(metrics_error)?;
            reports::write(&common.out, "correlation.csv", &reports::correlation_csv(&rows))?;
            let rhos: Vec<f64> = rows.iter().filter_map(|r| r.spearman).collect();
            println!("median Spearman {:.3} over {} crops", metrics::median(&rhos).unwrap_or(f64::NAN), rhos.len());
        }
    }
    Ok(())
}

fn metrics_error(e: metrics::MetricsError) -> Error {
    match e {
        metrics::MetricsError::Api(a) => a.into(),
        other => Error::Other(other.to_string()),
    }
}

/// Train with `cfg`, write the log and checkpoint into `out`; returns the
/// validation mIoU and the gate pass rate.
fn train_once(cfg: &RunConfig, job: &Job, out: &Path, with_eval: bool) -> Result<(f64, f64)> {
    let scales = cfg.scale_set()?;
    let ds = pipeline::dataset(cfg, job.data.as_deref())?;
    let strategy = cfg.train.strategy;
    if strategy.needs_cache() && job.cache.is_none() && job.data.is_some() {
        return Err(Error::Config(format!("strategy {strategy} needs --cache")));
    }
    let cache = if strategy.needs_cache() { Some(pipeline::cache(cfg, &ds, &scales, job.cache.as_deref())?) } else { None };
    prepare(out, cfg, serde_json::json!({ "dataset_hash": ds.hash, "cache": job.cache }))?;
    let client = strategy.uses_api().then(|| pipeline::client(cfg, job.api.as_deref()));
    let outcome = pipeline::train(&cfg.train, &ds, client.as_ref(), cache.as_ref(), &scales)?;
    reports::write(out, "train_log.csv", &outcome.log.to_csv())?;
    checkpoint::save(&out.join("checkpoint.bin"), &outcome.decoder, outcome.iterations_done, &pipeline::config_hash(cfg))?;
    let cm = pipeline::evaluate(&outcome.decoder, &ds.store)?;
    if with_eval {
        reports::write(out, "eval.csv", &reports::eval_csv(&cm, &ds.config.profiles))?;
    }
    Ok((cm.miou().unwrap_or(0.0), outcome.log.pass_rate()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
