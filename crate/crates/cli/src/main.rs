//! `sobn`: compile, sample, learn, query and run the calibration experiments.
//!
//! Exit codes: 0 success, 2 argument error, 3 input-format or I/O error, 4 numerical failure.

mod evidence;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sobn_core::em::{EmConfig, FisherWeighting};
use sobn_core::harness::{self, ExperimentConfig, ExperimentResult};
use sobn_core::infer::query_all;
use sobn_core::network::{
    ancestral_sample, mask_cells, sample_ground_truth, BayesNet, Dataset, NetworkSpec,
};
use sobn_core::posterior::PosteriorFile;
use sobn_core::{learn, Error, IntervalMethod, Learner, Spn, Structure};

#[derive(Parser)]
#[command(name = "sobn", version, about = "Second-order Bayesian network learning and calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a network into an arithmetic circuit and print its text form.
    Compile {
        /// Built-in structure id (chain3, dag9) or network JSON file.
        network: String,
        /// Elimination order as comma-separated node ids; defaults to reverse topological.
        #[arg(long)]
        order: Option<String>,
        /// Write the circuit here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a dataset from a network, with optional cell masking.
    Sample {
        network: String,
        #[arg(long, default_value_t = 120)]
        rows: usize,
        /// Probability of keeping each cell.
        #[arg(long, default_value_t = 1.0)]
        retain: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the parameters used, which are drawn at random when the network
        /// carries no CPTs.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Learn a parameter posterior from a CSV dataset.
    Learn {
        network: String,
        data: PathBuf,
        #[arg(long, value_parser = parse_learner, default_value = "bmm")]
        learner: Learner,
        /// Power of 1/p weighting each completion in the Fisher information.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        fisher_weighting: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean and variance of every unobserved conditional probability.
    Query {
        network: String,
        posterior: PathBuf,
        /// Comma-separated NODE=VALUE pairs.
        #[arg(long, default_value = "")]
        evidence: String,
        /// Also report the interval at this confidence level.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum, default_value_t = IntervalArg::Beta)]
        interval: IntervalArg,
    },
    /// Run a calibration experiment and write decbod.csv and summary.csv.
    Experiment {
        #[arg(value_enum)]
        which: Which,
        #[arg(long, default_value = "chain3")]
        structure: String,
        /// Trials per cell.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Training rows per trial (experiment a).
        #[arg(long, default_value_t = 120)]
        t: usize,
        /// Retention fractions (experiment a).
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        fractions: Vec<f64>,
        /// Complete seed rows and leaf-only rows (experiment b).
        #[arg(long, default_value_t = 20)]
        complete: usize,
        #[arg(long, default_value_t = 100)]
        partial: usize,
        #[arg(long, value_delimiter = ',', value_parser = parse_learner, default_values = ["bmm", "em-ga", "em-fisher"])]
        learners: Vec<Learner>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Leave the timing column empty so the outputs depend on the configuration only.
        #[arg(long)]
        no_timing: bool,
        #[arg(long, value_enum, default_value_t = IntervalArg::Beta)]
        interval: IntervalArg,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        fisher_weighting: u8,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum IntervalArg {
    Beta,
    TruncatedGaussian,
}

impl From<IntervalArg> for IntervalMethod {
    fn from(a: IntervalArg) -> Self {
        match a {
            IntervalArg::Beta => IntervalMethod::Beta,
            IntervalArg::TruncatedGaussian => IntervalMethod::TruncatedGaussian,
        }
    }
}

fn parse_learner(s: &str) -> Result<Learner, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A built-in structure id or a network file, with its CPTs when the file has them.
fn load_network(arg: &str) -> Result<(Structure, Option<Vec<f64>>)> {
    if let Ok(s) = Structure::builtin(arg) {
        return Ok((s, None));
    }
    let text = fs::read_to_string(arg).with_context(|| format!("cannot read network {arg}"))?;
    Ok(NetworkSpec::from_json(&text)?.into_parts()?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn compile(network: &str, order: Option<&str>, out: Option<&Path>) -> Result<()> {
    let (s, theta) = load_network(network)?;
    let natural: Vec<usize> = (0..s.len()).collect();
    let order = match order {
        Some(text) => text
            .split(',')
            .map(|id| {
                s.node_index(id.trim())
                    .ok_or_else(|| Error::Argument(format!("unknown node {:?} in order", id.trim())))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => s.topo_order().iter().rev().copied().collect(),
    };
    let spn = Spn::compile(&s, &order)?;
    let dump = spn.dump(&s);
    match out {
        Some(path) => create(path)?.write_all(dump.as_bytes())?,
        None => print!("{dump}"),
    }
    let st = spn.stats();
    eprintln!("sums={} products={} indicators={} params={}", st.sums, st.products, st.indicators, st.params);

    // the same polynomial under another order must give the same probability
    let other = if order == natural { s.topo_order().to_vec() } else { natural };
    let alt = Spn::compile(&s, &other)?;
    let theta = theta.unwrap_or_else(|| s.layout().families().iter().flat_map(|f| vec![1.0 / f.len as f64; f.len]).collect());
    let probe = sobn_core::Observation((0..s.len()).map(|i| (i % 2 == 1).then_some(0)).collect());
    let mut scratch = Default::default();
    let (a, b) = (spn.forward(&theta, &probe, &mut scratch), alt.forward(&theta, &probe, &mut scratch));
    eprintln!("probe p(e): {a:.12e} (order {order:?}) vs {b:.12e} (order {other:?}), |diff|={:.1e}", (a - b).abs());
    Ok(())
}

fn sample(network: &str, rows: usize, retain: f64, seed: u64, out: &Path, truth: Option<&Path>) -> Result<()> {
    let (s, theta) = load_network(network)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match theta {
        Some(t) => BayesNet::new(s.clone(), t)?,
        None => sample_ground_truth(&s, &mut rng),
    };
    let data = mask_cells(&ancestral_sample(&net, rows, &mut rng), retain, &mut rng)?;
    data.write_csv(&s, create(out)?)?;
    if let Some(path) = truth {
        let spec = NetworkSpec::from_structure(&s, Some(net.theta()));
        serde_json::to_writer_pretty(create(path)?, &spec).map_err(Error::from)?;
    }
    eprintln!("wrote {rows} rows ({:.3} of cells observed)", data.observed_fraction());
    Ok(())
}

fn learn_cmd(network: &str, data: &Path, learner: Learner, weighting: u8, seed: u64, out: &Path) -> Result<()> {
    let (s, _) = load_network(network)?;
    let file = File::open(data).with_context(|| format!("cannot open dataset {}", data.display()))?;
    let data = Dataset::read_csv(&s, file)?;
    let cfg = EmConfig { seed, fisher_weighting: FisherWeighting::from_exponent(weighting)?, ..EmConfig::default() };
    let spn = Spn::compile_default(&s);
    let start = Instant::now();
    let learned = learn(learner, &s, &spn, &data, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    let file = match &learned.dirichlet {
        Some(dp) => PosteriorFile::from_dirichlet(dp, s.layout()),
        None => PosteriorFile::from_gaussian(&learned.gaussian),
    };
    serde_json::to_writer_pretty(create(out)?, &file).map_err(Error::from)?;
    eprintln!("{learner}: {} rows in {elapsed:.4}s, {} skipped", data.len(), learned.skipped);
    if let Some(trace) = &learned.trace {
        eprintln!(
            "EM: {} iterations, converged={}, log-posterior={:.6}",
            trace.iterations,
            trace.converged,
            trace.log_posterior.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct QueryLine {
    node: String,
    value: usize,
    mean: f64,
    variance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    interval: Option<(f64, f64)>,
}

fn query(network: &str, posterior: &Path, text: &str, gamma: Option<f64>, method: IntervalMethod) -> Result<()> {
    let (s, _) = load_network(network)?;
    let evidence = evidence::parse(&s, text)?;
    let raw = fs::read_to_string(posterior).with_context(|| format!("cannot read {}", posterior.display()))?;
    let file: PosteriorFile = serde_json::from_str(&raw).map_err(|e| Error::Format(format!("posterior file: {e}")))?;
    let post = file.to_gaussian(s.layout())?;
    let spn = Spn::compile_default(&s);
    let mut lines = Vec::new();
    for q in query_all(&spn, &s, &post, &evidence)? {
        for r in q.records(&s) {
            let interval = gamma.map(|g| method.interval(r.mean, r.variance, g)).transpose()?;
            lines.push(QueryLine { node: r.node, value: r.value, mean: r.mean, variance: r.variance, interval });
        }
    }
    let text = serde_json::to_string_pretty(&lines).map_err(Error::from)?;
    writeln!(std::io::stdout().lock(), "{text}")?;
    Ok(())
}

/// A built-in id, or a network file; anything else is an argument error.
fn experiment_structure(arg: &str) -> Result<Structure> {
    if Path::new(arg).is_file() {
        return Ok(load_network(arg)?.0);
    }
    Ok(Structure::builtin(arg)?)
}

fn write_outputs(result: &ExperimentResult, out: &Path, timing: bool) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    harness::write_decbod_csv(create(&out.join("decbod.csv"))?, result)?;
    harness::write_summary_csv(create(&out.join("summary.csv"))?, result, timing)?;
    for c in &result.cells {
        println!(
            "{:<10} {:<14} mean_abs={:.4} mean_time_s={:.4} failures={}",
            c.learner.id(),
            c.cell,
            c.report.curve.mean_abs,
            c.report.timing.mean,
            c.report.failures
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compile { network, order, out } => compile(&network, order.as_deref(), out.as_deref()),
        Command::Sample { network, rows, retain, seed, out, truth } => {
            sample(&network, rows, retain, seed, &out, truth.as_deref())
        }
        Command::Learn { network, data, learner, fisher_weighting, seed, out } => {
            learn_cmd(&network, &data, learner, fisher_weighting, seed, &out)
        }
        Command::Query { network, posterior, evidence, gamma, interval } => {
            query(&network, &posterior, &evidence, gamma, interval.into())
        }
        Command::Experiment {
            which,
            structure,
            n,
            t,
            fractions,
            complete,
            partial,
            learners,
            seed,
            out,
            jobs,
            no_timing,
            interval,
            fisher_weighting,
        } => {
            let s = experiment_structure(&structure)?;
            let cfg = ExperimentConfig {
                learners,
                trials: n,
                rows: t,
                seed,
                interval: interval.into(),
                em: EmConfig {
                    fisher_weighting: FisherWeighting::from_exponent(fisher_weighting)?,
                    ..EmConfig::default()
                },
                jobs,
                ..ExperimentConfig::new(&structure, s)
            };
            let result = match which {
                Which::A => harness::experiment_a(&cfg, &fractions)?,
                Which::B => harness::experiment_b(&cfg, complete, partial)?,
            };
            write_outputs(&result, &out, !no_timing)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_input_error() => 3,
        Some(Error::Argument(_) | Error::Precondition(_)) => 2,
        Some(_) => 4,
        // bare I/O errors raised with context
        None => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
