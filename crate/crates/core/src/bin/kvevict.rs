use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use kvevict::attention::{modality_sparsity, SparsityCount, DEFAULT_SPARSITY_THRESHOLD};
use kvevict::harness::{run_experiment, ExperimentSpec, OutputSpec, SEED_ENV};
use kvevict::prune::{overlap_rate, per_layer_evictable, prune_prefill, DapConfig};
use kvevict::sim::{generate_trace, StreamConfig, TraceInput};
use kvevict::theory::monte_carlo_checks;

#[derive(Parser)]
#[command(name = "kvevict", version, about = "KV-cache eviction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment spec and write its report.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Override the report path from the spec.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write the layer-0 decode event log (JSON lines).
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Sparsity of each layer's prefill attention.
    Sparsity {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SPARSITY_THRESHOLD)]
        threshold: f64,
    },
    /// Layer-0 pruning decision and its overlap with every layer.
    Overlap {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        r: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        max_evict: Option<usize>,
    },
    /// Monte-Carlo check of the single-token loss bound.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of every instance; stdout gets only the summary.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic attention trace.
    GenerateTrace {
        #[arg(long)]
        out: PathBuf,
        /// StreamConfig JSON; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Run { spec, output, events } => {
            let mut exp = ExperimentSpec::read(&spec)?;
            exp.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
            if let Some(path) = output {
                let format = match path.extension().and_then(|e| e.to_str()) {
                    Some("json") => "json",
                    _ => "csv",
                };
                let old = exp.output.take();
                exp.output = Some(OutputSpec {
                    path,
                    format: old.as_ref().map_or_else(|| format.to_string(), |o| o.format.clone()),
                    events: old.and_then(|o| o.events),
                });
            }
            if let Some(path) = events {
                match exp.output.as_mut() {
                    Some(out) => out.events = Some(path),
                    None => bail!("--events needs an output path in the spec or --output"),
                }
            }
            let records = run_experiment(&exp)?;
            if exp.output.is_none() {
                let body = kvevict::harness::render_report(&records, kvevict::harness::ReportFormat::Csv)?;
                stdout.write_all(body.as_bytes())?;
            } else {
                writeln!(stdout, "{} records", records.len())?;
            }
        }
        Command::Sparsity { trace, threshold } => {
            let input = TraceInput::read(&trace)?;
            writeln!(stdout, "layer,overall,visual,text")?;
            for (i, m) in input.layer_matrices()?.iter().enumerate() {
                let s = modality_sparsity(m, threshold)?;
                let opt = |v: Option<SparsityCount>| v.map(|c| c.rate().to_string()).unwrap_or_default();
                writeln!(stdout, "{i},{},{},{}", s.overall.rate(), opt(s.visual), opt(s.text))?;
            }
        }
        Command::Overlap { trace, r, alpha, max_evict } => {
            let layers = TraceInput::read(&trace)?.layer_matrices()?;
            let mut cfg = DapConfig::new(r, alpha);
            if let Some(c) = max_evict {
                cfg = cfg.with_max_evict(c);
            }
            let decision = prune_prefill(&layers[0], &cfg)?;
            writeln!(stdout, "evicted={} retained={}", decision.evicted.len(), decision.retained.len())?;
            if decision.evicted.is_empty() {
                writeln!(stdout, "overlap undefined: nothing evicted at layer 0")?;
            } else {
                let rates = overlap_rate(&decision.evicted, &per_layer_evictable(&layers, &cfg)?)?;
                writeln!(stdout, "layer,overlap")?;
                for (i, rate) in rates.iter().enumerate() {
                    writeln!(stdout, "{i},{rate}")?;
                }
                let mean = rates.iter().sum::<f64>() / rates.len() as f64;
                writeln!(stdout, "mean,{mean}")?;
            }
        }
        Command::VerifyTheory { instances, seed, output } => {
            let checks = monte_carlo_checks(instances, seed);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["seed", "lambda", "epsilon", "q", "delay", "loss", "bound_holds"])?;
            for c in &checks {
                w.write_record([
                    c.seed.to_string(),
                    c.lambda.to_string(),
                    c.epsilon.to_string(),
                    c.q.to_string(),
                    c.delay.to_string(),
                    c.loss.to_string(),
                    c.bound_holds.to_string(),
                ])?;
            }
            let body = w.into_inner()?;
            match output {
                Some(path) => std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?,
                None => stdout.write_all(&body)?,
            }
            let violations = checks.iter().filter(|c| !c.bound_holds).count();
            eprintln!("{} instances, {violations} violations", checks.len());
            if violations > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::GenerateTrace { out, config, seed } => {
            let mut cfg: StreamConfig = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => StreamConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            generate_trace(&cfg)?.to_trace_file().write(&out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
