//! Calibration measurement of second-order inferences and the two simulation experiments.
//!
//! A trial samples a ground-truth network, trains a learner on masked samples from it and
//! checks how often the exact conditional probabilities fall inside the query intervals at
//! each confidence level. Every trial draws from its own substream of the master seed, so a
//! (seed, trial) pair fixes everything and trials can run in any order.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::infer::query_all;
use crate::learner::{learn, Learner};
use crate::network::{
    ancestral_sample, mask_cells, mask_pattern, sample_assignment, sample_ground_truth, Dataset,
    Observation, Structure,
};
use crate::posterior::IntervalMethod;
use crate::spn::{Scratch, Spn};

pub const GRID_POINTS: usize = 101;
/// Probability that a variable of the query assignment is revealed as evidence.
pub const REVEAL_PROBABILITY: f64 = 0.3;
/// Query variances are floored here so that no interval degenerates to a point.
pub const VARIANCE_FLOOR: f64 = 1e-18;
pub const RETENTION_FRACTIONS: [f64; 3] = [0.1, 0.5, 0.9];

/// Confidence level of grid point `i`.
pub fn gamma(i: usize) -> f64 {
    i as f64 / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Masking {
    /// Each cell retained independently with this probability.
    Cells(f64),
    /// `complete` full rows followed by `partial` rows showing the leaves only.
    SeededLeaves { complete: usize, partial: usize },
}

#[derive(Clone, Debug)]
pub struct TrialConfig {
    pub structure_id: String,
    pub structure: Structure,
    pub trials: usize,
    pub rows: usize,
    pub masking: Masking,
    pub learner: Learner,
    pub reveal: f64,
    pub interval: IntervalMethod,
    pub em: EmConfig,
    pub seed: u64,
}

impl TrialConfig {
    pub fn new(structure_id: &str, structure: Structure, learner: Learner, masking: Masking) -> Self {
        let rows = match masking {
            Masking::SeededLeaves { complete, partial } => complete + partial,
            Masking::Cells(_) => 120,
        };
        Self {
            structure_id: structure_id.to_string(),
            structure,
            trials: 200,
            rows,
            masking,
            learner,
            reveal: REVEAL_PROBABILITY,
            interval: IntervalMethod::Beta,
            em: EmConfig::default(),
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Argument("at least one trial is required".into()));
        }
        if !(0.0..=1.0).contains(&self.reveal) {
            return Err(Error::Argument(format!("reveal probability {} outside [0, 1]", self.reveal)));
        }
        match self.masking {
            Masking::Cells(f) if !(0.0..=1.0).contains(&f) => {
                Err(Error::Argument(format!("retention fraction {f} outside [0, 1]")))
            }
            Masking::SeededLeaves { complete, partial } if complete + partial != self.rows => {
                Err(Error::Argument("seeded rows must add up to the row count".into()))
            }
            _ => self.em.validate(&self.structure),
        }
    }
}

/// One query value of one trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageRecord {
    pub node: usize,
    pub value: usize,
    pub mean: f64,
    pub variance: f64,
    pub truth: f64,
    /// Smallest confidence level whose interval contains `truth`.
    pub threshold: f64,
}

impl CoverageRecord {
    pub fn contained(&self, gamma: f64) -> bool {
        gamma >= self.threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    /// Empty when the trial failed.
    pub records: Vec<CoverageRecord>,
    pub learn_time: f64,
    pub skipped: usize,
    pub failed: bool,
}

/// Containment counts per grid point; sums of integers, so merging is order independent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageCounts {
    pub hits: Vec<u64>,
    pub total: u64,
}

impl Default for CoverageCounts {
    fn default() -> Self {
        Self { hits: vec![0; GRID_POINTS], total: 0 }
    }
}

impl CoverageCounts {
    pub fn add(&mut self, record: &CoverageRecord) {
        for (i, h) in self.hits.iter_mut().enumerate() {
            *h += record.contained(gamma(i)) as u64;
        }
        self.total += 1;
    }

    pub fn merge(&mut self, other: &CoverageCounts) {
        self.hits.iter_mut().zip(&other.hits).for_each(|(a, b)| *a += b);
        self.total += other.total;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecbodCurve {
    pub gamma: Vec<f64>,
    pub r: Vec<f64>,
    /// `(1/101) Σ |r(γ) − γ|`
    pub mean_abs: f64,
    pub count: u64,
}

impl DecbodCurve {
    pub fn from_counts(counts: &CoverageCounts) -> Result<Self> {
        if counts.total == 0 {
            return Err(Error::Precondition("no coverage records to aggregate".into()));
        }
        let gamma: Vec<f64> = (0..GRID_POINTS).map(gamma).collect();
        let r: Vec<f64> = counts.hits.iter().map(|&h| h as f64 / counts.total as f64).collect();
        let mean_abs = r.iter().zip(&gamma).map(|(r, g)| (r - g).abs()).sum::<f64>() / GRID_POINTS as f64;
        Ok(Self { gamma, r, mean_abs, count: counts.total })
    }

    /// Coverage at confidence level `i / 100`.
    pub fn at(&self, i: usize) -> f64 {
        self.r[i]
    }
}

pub fn decbod(records: &[CoverageRecord]) -> Result<DecbodCurve> {
    let mut counts = CoverageCounts::default();
    records.iter().for_each(|r| counts.add(r));
    DecbodCurve::from_counts(&counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingStats {
    pub mean: f64,
    pub times: Vec<f64>,
}

impl TimingStats {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Precondition("no timings recorded".into()));
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        Ok(Self { mean, times })
    }
}

#[derive(Clone, Debug)]
pub struct TrialReport {
    pub curve: DecbodCurve,
    /// Learn times of the successful trials, in trial order.
    pub timing: TimingStats,
    pub skipped: usize,
    pub failures: usize,
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Assignment with each variable revealed with probability `reveal`; one variable is always
/// left hidden so that there is something to query.
fn draw_evidence<R: Rng>(assignment: &[usize], reveal: f64, rng: &mut R) -> Observation {
    let mut e: Vec<Option<usize>> =
        assignment.iter().map(|&v| (rng.random::<f64>() < reveal).then_some(v)).collect();
    let forced = rng.random_range(0..assignment.len());
    if e.iter().all(Option::is_some) {
        e[forced] = None;
    }
    Observation(e)
}

fn training_data<R: Rng>(cfg: &TrialConfig, net: &crate::network::BayesNet, rng: &mut R) -> Result<Dataset> {
    let full = ancestral_sample(net, cfg.rows, rng);
    match cfg.masking {
        Masking::Cells(f) => mask_cells(&full, f, rng),
        Masking::SeededLeaves { complete, .. } => {
            let leaves = cfg.structure.leaves();
            let mut rows = full.rows[..complete].to_vec();
            let tail = Dataset { num_nodes: full.num_nodes, rows: full.rows[complete..].to_vec() };
            rows.extend(mask_pattern(&tail, &leaves)?.rows);
            Ok(Dataset { num_nodes: full.num_nodes, rows })
        }
    }
}

fn trial_with(cfg: &TrialConfig, spn: &Spn, trial: u64) -> Result<TrialOutcome> {
    let s = &cfg.structure;
    let mut rng = trial_rng(cfg.seed, trial);
    let net = sample_ground_truth(s, &mut rng);
    let data = training_data(cfg, &net, &mut rng)?;
    let assignment = sample_assignment(&net, &mut rng);
    let evidence = draw_evidence(&assignment, cfg.reveal, &mut rng);
    let em = EmConfig { seed: rng.random(), ..cfg.em.clone() };

    let start = Instant::now();
    let learned = learn(cfg.learner, s, spn, &data, &em);
    let learn_time = start.elapsed().as_secs_f64();
    let failed = |e: Error| {
        log::warn!("trial {trial} with {} failed: {e}", cfg.learner);
        Ok(TrialOutcome { records: Vec::new(), learn_time, skipped: 0, failed: true })
    };
    let learned = match learned {
        Ok(l) => l,
        Err(e) => return failed(e),
    };
    let results = match query_all(spn, s, &learned.gaussian, &evidence) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };

    let mut scratch = Scratch::default();
    let p_e = spn.forward(net.theta(), &evidence, &mut scratch);
    let mut records = Vec::new();
    for q in &results {
        for (value, (&mean, &variance)) in q.mean.iter().zip(&q.variance).enumerate() {
            let truth = spn.forward(net.theta(), &evidence.with(q.node, value), &mut scratch) / p_e;
            let variance = variance.max(VARIANCE_FLOOR);
            let threshold = cfg.interval.coverage_threshold(mean, variance, truth.clamp(0.0, 1.0))?;
            records.push(CoverageRecord { node: q.node, value, mean, variance, truth, threshold });
        }
    }
    Ok(TrialOutcome { records, learn_time, skipped: learned.skipped, failed: false })
}

/// Runs trial `trial` of `cfg`: sample, mask, learn, query and score against the truth.
pub fn run_trial(cfg: &TrialConfig, trial: u64) -> Result<TrialOutcome> {
    cfg.validate()?;
    trial_with(cfg, &Spn::compile_default(&cfg.structure), trial)
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))
}

fn run_cell_in(cfg: &TrialConfig, spn: &Spn) -> Result<TrialReport> {
    cfg.validate()?;
    let outcomes = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| trial_with(cfg, spn, t))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = CoverageCounts::default();
    let (mut times, mut skipped, mut failures) = (Vec::new(), 0, 0);
    for o in &outcomes {
        if o.failed {
            failures += 1;
            continue;
        }
        o.records.iter().for_each(|r| counts.add(r));
        times.push(o.learn_time);
        skipped += o.skipped;
    }
    if counts.total == 0 {
        return Err(Error::Learner(format!("all {} trials of {} failed", cfg.trials, cfg.learner)));
    }
    Ok(TrialReport {
        curve: DecbodCurve::from_counts(&counts)?,
        timing: TimingStats::new(times)?,
        skipped,
        failures,
    })
}

/// All trials of one (learner, masking) cell.
pub fn run_cell(cfg: &TrialConfig, jobs: Option<usize>) -> Result<TrialReport> {
    let spn = Spn::compile_default(&cfg.structure);
    pool(jobs)?.install(|| run_cell_in(cfg, &spn))
}

/// Learn-time statistics of one cell.
pub fn profile(cfg: &TrialConfig, jobs: Option<usize>) -> Result<TimingStats> {
    Ok(run_cell(cfg, jobs)?.timing)
}

/// Shared settings of an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub structure_id: String,
    pub structure: Structure,
    pub learners: Vec<Learner>,
    pub trials: usize,
    pub rows: usize,
    pub seed: u64,
    pub interval: IntervalMethod,
    pub em: EmConfig,
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(structure_id: &str, structure: Structure) -> Self {
        Self {
            structure_id: structure_id.to_string(),
            structure,
            learners: Learner::ALL.to_vec(),
            trials: 200,
            rows: 120,
            seed: 0,
            interval: IntervalMethod::Beta,
            em: EmConfig::default(),
            jobs: None,
        }
    }

    fn trial(&self, learner: Learner, masking: Masking) -> TrialConfig {
        TrialConfig {
            structure_id: self.structure_id.clone(),
            structure: self.structure.clone(),
            trials: self.trials,
            rows: self.rows,
            masking,
            learner,
            reveal: REVEAL_PROBABILITY,
            interval: self.interval,
            em: self.em.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub learner: Learner,
    pub cell: String,
    pub report: TrialReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub seed: u64,
    /// Hex prefix of the SHA-256 of the canonical configuration.
    pub config_hash: String,
    pub cells: Vec<CellResult>,
}

impl ExperimentResult {
    pub fn cell(&self, learner: Learner, cell: &str) -> Option<&TrialReport> {
        self.cells.iter().find(|c| c.learner == learner && c.cell == cell).map(|c| &c.report)
    }
}

#[derive(Serialize)]
struct CanonicalConfig<'a> {
    experiment: &'a str,
    structure: &'a str,
    cells: Vec<Masking>,
    learners: &'a [Learner],
    trials: usize,
    rows: usize,
    seed: u64,
    reveal: f64,
    interval: IntervalMethod,
    em: &'a EmConfig,
}

fn config_hash(cfg: &ExperimentConfig, experiment: &str, cells: &[Masking]) -> String {
    let canonical = CanonicalConfig {
        experiment,
        structure: &cfg.structure_id,
        cells: cells.to_vec(),
        learners: &cfg.learners,
        trials: cfg.trials,
        rows: cfg.rows,
        seed: cfg.seed,
        reveal: REVEAL_PROBABILITY,
        interval: cfg.interval,
        em: &cfg.em,
    };
    let json = serde_json::to_string(&canonical).expect("config serializes");
    Sha256::digest(json.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Label of a cell-masking column, e.g. `f=0.5`.
pub fn fraction_label(f: f64) -> String {
    format!("f={f}")
}

pub const SEEDED_LEAVES_LABEL: &str = "seeded-leaves";

fn run_experiment(
    cfg: &ExperimentConfig,
    name: &str,
    cells: Vec<(String, Masking)>,
) -> Result<ExperimentResult> {
    let spn = Spn::compile_default(&cfg.structure);
    let masks: Vec<Masking> = cells.iter().map(|(_, m)| m.clone()).collect();
    let config_hash = config_hash(cfg, name, &masks);
    let pool = pool(cfg.jobs)?;
    let mut out = Vec::new();
    for &learner in &cfg.learners {
        for (label, masking) in &cells {
            let trial = cfg.trial(learner, masking.clone());
            let report = pool.install(|| run_cell_in(&trial, &spn))?;
            log::info!("{learner} {label}: mean_abs={:.4}", report.curve.mean_abs);
            out.push(CellResult { learner, cell: label.clone(), report });
        }
    }
    Ok(ExperimentResult { seed: cfg.seed, config_hash, cells: out })
}

/// Coverage across retention fractions with cell-level masking.
pub fn experiment_a(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<ExperimentResult> {
    if fractions.is_empty() {
        return Err(Error::Argument("no retention fractions given".into()));
    }
    let cells = fractions.iter().map(|&f| (fraction_label(f), Masking::Cells(f))).collect();
    run_experiment(cfg, "a", cells)
}

/// Coverage after `complete` full rows followed by `partial` leaf-only rows.
pub fn experiment_b(cfg: &ExperimentConfig, complete: usize, partial: usize) -> Result<ExperimentResult> {
    if cfg.structure.leaves().is_empty() {
        return Err(Error::Structure("structure has no leaves".into()));
    }
    let cfg = ExperimentConfig { rows: complete + partial, ..cfg.clone() };
    let cells = vec![(SEEDED_LEAVES_LABEL.to_string(), Masking::SeededLeaves { complete, partial })];
    run_experiment(&cfg, "b", cells)
}

fn header<W: Write>(w: &mut W, result: &ExperimentResult) -> Result<()> {
    writeln!(w, "# seed={} config={}", result.seed, result.config_hash)?;
    Ok(())
}

/// `learner,cell,gamma,r`, one row per grid point.
pub fn write_decbod_csv<W: Write>(mut w: W, result: &ExperimentResult) -> Result<()> {
    header(&mut w, result)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["learner", "cell", "gamma", "r"])?;
    for c in &result.cells {
        for (g, r) in c.report.curve.gamma.iter().zip(&c.report.curve.r) {
            csv.write_record([c.learner.id(), &c.cell, &format!("{g:.2}"), &r.to_string()])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// `learner,cell,mean_abs,mean_time_s,failures`. With `timing` off the time column is left
/// empty, which makes the file a pure function of the configuration.
pub fn write_summary_csv<W: Write>(mut w: W, result: &ExperimentResult, timing: bool) -> Result<()> {
    header(&mut w, result)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["learner", "cell", "mean_abs", "mean_time_s", "failures"])?;
    for c in &result.cells {
        let time = if timing { c.report.timing.mean.to_string() } else { String::new() };
        csv.write_record([
            c.learner.id(),
            &c.cell,
            &c.report.curve.mean_abs.to_string(),
            &time,
            &c.report.failures.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
