//! Command-line front end: run configuration, flag overrides and the
//! subcommands tying the pipeline together.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::angle::{bfs_par, NeighborOrder};
use crate::cases::builtin;
use crate::eval::{
    model_init, predict_state, sample_errors, summarize, warmstart_bench, PredictedState,
    Thresholds,
};
use crate::grid::{graph_stats, load_case, Network};
use crate::loss::StageSchedule;
use crate::lts::{self, read_dataset, slice, DatasetRecord, DatasetSpec};
use crate::pf::{solve, Init, PowerFlowSolution, SolveOptions};
use crate::rmgl::{Model, ModelConfig, ModelInput, ModelOutput};
use crate::train::{self, TrainConfig, TrainError};

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input, configuration or file; exit code 1.
    #[error("{0}")]
    Input(String),
    /// Solver non-convergence or non-finite training; exit code 2.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn input<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{ctx}: {e}"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub case: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

/// Full configuration of a run. Loaded from `--config` and overridden by
/// flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub schedule: StageSchedule,
    pub train: TrainOptions,
    pub seed: Option<u64>,
    pub nr: SolveOptions,
    pub thresholds: Thresholds,
    /// Worker threads; all available cores when absent.
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(input(&path.display().to_string()))?;
        serde_json::from_str(&text).map_err(input(&path.display().to_string()))
    }

    fn apply(&mut self, f: &Common) {
        let p = &mut self.paths;
        if !f.case.is_empty() {
            p.case = f.case.clone();
        }
        for (dst, src) in [
            (&mut p.dataset, &f.dataset),
            (&mut p.checkpoint, &f.checkpoint),
            (&mut p.report, &f.report),
            (&mut p.predictions, &f.predictions),
            (&mut p.out, &f.out),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if f.seed.is_some() {
            self.seed = f.seed;
        }
        if f.workers.is_some() {
            self.workers = f.workers;
        }
        if let Some(n) = f.nmax {
            self.model.n_max = n;
        }
        if let Some(e) = f.epochs_stage1 {
            self.schedule.stage1_epochs = e;
        }
        if let Some(e) = f.epochs_stage2 {
            self.schedule.stage2_epochs = e;
        }
        if let Some(lr) = f.lr {
            self.train.lr = lr;
        }
        if let Some(t) = f.tol {
            self.nr.tol = t;
        }
        if let Some(m) = f.max_iter {
            self.nr.max_iter = m;
        }
        if let Some(v) = f.mu_v {
            self.thresholds.mu_v = v;
        }
        if let Some(v) = f.mu_sl {
            self.thresholds.mu_sl = v;
        }
        if let Some(v) = f.mu_ds {
            self.thresholds.mu_ds = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.thresholds.validate().map_err(CliError::Input)?;
        self.model.validate().map_err(input("model"))?;
        if !(self.nr.tol > 0.0) || self.nr.max_iter == 0 {
            return Err(CliError::Input("NR tolerance and iteration limit must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(CliError::Input("workers must be positive".into()));
        }
        let p = &self.paths;
        for path in p
            .case
            .iter()
            .filter(|c| builtin(&c.to_string_lossy()).is_none())
            .chain(p.dataset.iter())
            .chain(p.predictions.iter())
        {
            if !path.exists() {
                return Err(CliError::Input(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        })
    }

    fn require_seed(&self, cmd: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Input(format!("{cmd} requires --seed or a seed in the config")))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut t = TrainConfig {
            model: self.model.clone(),
            schedule: self.schedule,
            batch_size: self.train.batch_size,
            seed,
            ..Default::default()
        };
        t.adam.lr = self.train.lr;
        t
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Case file or built-in name (`ieee39`); repeatable.
    #[arg(long, global = true)]
    pub case: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Model outputs (JSON Lines) from `infer`.
    #[arg(long, global = true)]
    pub predictions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub nmax: Option<usize>,
    #[arg(long = "epochs-stage1", global = true)]
    pub epochs_stage1: Option<usize>,
    #[arg(long = "epochs-stage2", global = true)]
    pub epochs_stage2: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    /// Voltage threshold in p.u.
    #[arg(long = "mu-v", global = true)]
    pub mu_v: Option<f64>,
    /// Branch power threshold in MVA.
    #[arg(long = "mu-sl", global = true)]
    pub mu_sl: Option<f64>,
    /// Power balance threshold in MVA.
    #[arg(long = "mu-ds", global = true)]
    pub mu_ds: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "sampfa", version, about = "Scale-adaptive power flow analysis")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Newton-Raphson power flow from a flat start.
    Solve,
    /// Graph statistics of each case as CSV.
    Stats,
    /// One topology slice of a solved case.
    Slice {
        #[arg(long)]
        size: usize,
        /// Start bus; drawn from the seed when absent.
        #[arg(long)]
        start: Option<usize>,
    },
    /// Generate an LTS dataset as JSON Lines.
    Dataset,
    /// Train a model on a dataset.
    Train,
    /// Model outputs for every dataset sample as JSON Lines.
    Infer,
    /// Phase angles recovered from predicted flows, as JSON Lines.
    Recover,
    /// Extreme-error report of predictions against dataset ground truth.
    Eval,
    /// Newton iterations from flat and model (or exact) initial points.
    WarmstartBench {
        /// Use the exact dataset solutions as initial points.
        #[arg(long)]
        exact: bool,
    },
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    if let Some(net) = builtin(&path.to_string_lossy()) {
        return Ok(net);
    }
    load_case(path).map_err(input(&path.display().to_string()))
}

fn solve_required(net: &Network, opts: &SolveOptions) -> Result<PowerFlowSolution, CliError> {
    let (sol, rep) = solve(net, &Init::Flat, opts).map_err(|e| CliError::Numerical(e.to_string()))?;
    if !rep.converged {
        return Err(CliError::Numerical(format!(
            "power flow did not converge in {} iterations (mismatch {:.3e})",
            rep.iterations, rep.max_mismatch
        )));
    }
    Ok(sol)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(input(&p.display().to_string()))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn write_json<T: Serialize>(w: &mut dyn Write, value: &T) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *w, value).map_err(input("output"))?;
    writeln!(w).map_err(input("output"))
}

fn write_jsonl<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<(), CliError> {
    let mut w = output(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(input("output"))?;
        writeln!(w).map_err(input("output"))?;
    }
    w.flush().map_err(input("output"))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = File::open(path).map_err(input(&path.display().to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(input(&path.display().to_string()))?;
        if !line.trim().is_empty() {
            out.push(
                serde_json::from_str(&line)
                    .map_err(input(&format!("{} line {}", path.display(), i + 1)))?,
            );
        }
    }
    Ok(out)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Input(format!("missing --{flag}")))
}

fn dataset(cfg: &RunConfig) -> Result<Vec<DatasetRecord>, CliError> {
    let p = need(&cfg.paths.dataset, "dataset")?;
    let recs = read_dataset(p).map_err(input(&p.display().to_string()))?;
    if recs.is_empty() {
        return Err(CliError::Input(format!("{} holds no samples", p.display())));
    }
    Ok(recs)
}

fn model(cfg: &RunConfig) -> Result<Model, CliError> {
    let p = need(&cfg.paths.checkpoint, "checkpoint")?;
    Model::load(p).map_err(input(&p.display().to_string()))
}

/// Predicted states with recovered angles, from `--predictions` when given
/// and from the checkpoint otherwise.
fn predicted_states(cfg: &RunConfig, recs: &[DatasetRecord]) -> Result<Vec<PredictedState>, CliError> {
    if let Some(p) = &cfg.paths.predictions {
        let outs: Vec<ModelOutput> = read_jsonl(p)?;
        if outs.len() != recs.len() {
            return Err(CliError::Input(format!(
                "{} predictions for {} samples",
                outs.len(),
                recs.len()
            )));
        }
        return recs
            .iter()
            .zip(&outs)
            .map(|(r, o)| {
                if o.x_out.len() != r.network.n_buses() || o.edges != crate::rmgl::directed_edges(&r.network) {
                    return Err(CliError::Input("prediction does not match its sample".into()));
                }
                let mut s = PredictedState::from_model_output(o, &r.network);
                s.recover_angles(&r.network);
                Ok(s)
            })
            .collect();
    }
    let m = model(cfg)?;
    recs.iter()
        .map(|r| predict_state(&m, &r.network).map_err(input("inference")))
        .collect()
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    solution: &'a PowerFlowSolution,
    report: &'a crate::pf::SolveReport,
}

#[derive(Serialize)]
struct StatsRow {
    case: String,
    n_buses: usize,
    n_branches: usize,
    avg_degree: f64,
    algebraic_connectivity: f64,
    connected: bool,
}

#[derive(Serialize)]
struct RecoveredAngles {
    index: usize,
    theta: Vec<f64>,
    unassigned: Vec<usize>,
    singular_branches: Vec<usize>,
    max_cycle_residual: f64,
}

#[derive(Serialize)]
struct PerSample {
    index: usize,
    e_v: f64,
    e_theta: Option<f64>,
    e_sl: f64,
    e_ds: f64,
}

fn run_command(cmd: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.paths.out.as_deref();
    match cmd {
        Command::Solve => {
            let path = cfg.paths.case.first().ok_or_else(|| CliError::Input("missing --case".into()))?;
            let net = load_network(path)?;
            let (sol, rep) = solve(&net, &Init::Flat, &cfg.nr).map_err(|e| CliError::Numerical(e.to_string()))?;
            write_json(&mut *output(out)?, &SolveOutput { solution: &sol, report: &rep })?;
            if !rep.converged {
                return Err(CliError::Numerical(format!(
                    "not converged after {} iterations (mismatch {:.3e})",
                    rep.iterations, rep.max_mismatch
                )));
            }
            eprintln!(
                "converged in {} iterations, max mismatch {:.3e} p.u.",
                rep.iterations, rep.max_mismatch
            );
        }
        Command::Stats => {
            if cfg.paths.case.is_empty() {
                return Err(CliError::Input("missing --case".into()));
            }
            let mut w = csv::Writer::from_writer(output(out)?);
            for path in &cfg.paths.case {
                let st = graph_stats(&load_network(path)?);
                w.serialize(StatsRow {
                    case: path.display().to_string(),
                    n_buses: st.n_buses,
                    n_branches: st.n_branches,
                    avg_degree: st.avg_degree,
                    algebraic_connectivity: st.algebraic_connectivity,
                    connected: st.connected,
                })
                .map_err(input("output"))?;
            }
            w.flush().map_err(input("output"))?;
        }
        Command::Slice { size, start } => {
            let seed = cfg.require_seed("slice")?;
            let path = cfg.paths.case.first().ok_or_else(|| CliError::Input("missing --case".into()))?;
            let net = load_network(path)?;
            if *size < 1 || *size > net.n_buses() || start.is_some_and(|s| s >= net.n_buses()) {
                return Err(CliError::Input("slice size or start bus out of range".into()));
            }
            let sol = solve_required(&net, &cfg.nr)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut attempt = 0;
            let sample = loop {
                let s0 = start.unwrap_or_else(|| rng.gen_range(0..net.n_buses()));
                match slice(&net, &sol, s0, *size, &mut rng) {
                    Ok(s) => break s,
                    Err(e) if start.is_some() || attempt >= lts::MAX_ATTEMPTS => {
                        return Err(CliError::Input(e.to_string()))
                    }
                    Err(_) => attempt += 1,
                }
            };
            let mut sample = sample;
            sample.provenance.seed = seed;
            write_json(&mut *output(out)?, &DatasetRecord::from_sample(&sample))?;
        }
        Command::Dataset => {
            let seed = cfg.require_seed("dataset")?;
            if cfg.paths.case.is_empty() {
                return Err(CliError::Input("missing --case".into()));
            }
            let out = need(&cfg.paths.out, "out")?;
            let parents = cfg
                .paths
                .case
                .iter()
                .map(|p| {
                    let net = load_network(p)?;
                    let sol = solve_required(&net, &cfg.nr)?;
                    Ok((net, sol))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let spec = DatasetSpec { seed, ..cfg.dataset.clone() };
            let report = lts::generate_dataset(&parents, &spec, &cfg.nr, cfg.workers(), out)
                .map_err(|e| match e {
                    lts::LtsError::Exhausted { .. } => CliError::Numerical(e.to_string()),
                    e => CliError::Input(e.to_string()),
                })?;
            let mut report_path = out.as_os_str().to_owned();
            report_path.push(".report.json");
            let rp = cfg.paths.report.clone().unwrap_or_else(|| PathBuf::from(report_path));
            write_json(&mut *output(Some(&rp))?, &report)?;
            eprintln!(
                "{} samples ({} discarded), report in {}",
                report.samples,
                report.discarded,
                rp.display()
            );
        }
        Command::Train => {
            let seed = cfg.require_seed("train")?;
            let ckpt = need(&cfg.paths.checkpoint, "checkpoint")?;
            let recs = dataset(cfg)?;
            if let Some(r) = recs.iter().find(|r| r.network.n_buses() > cfg.model.n_max) {
                return Err(CliError::Input(format!(
                    "sample with {} buses exceeds n_max {}",
                    r.network.n_buses(),
                    cfg.model.n_max
                )));
            }
            let (model, logs) = train::train(&recs, &cfg.train_config(seed), |_| {}).map_err(|e| match e {
                TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
                e => CliError::Input(e.to_string()),
            })?;
            model.save(ckpt).map_err(input(&ckpt.display().to_string()))?;
            let log_path = cfg.paths.out.clone().unwrap_or_else(|| {
                let mut p = ckpt.as_os_str().to_owned();
                p.push(".log.csv");
                PathBuf::from(p)
            });
            train::write_epoch_log(&log_path, &logs).map_err(input("epoch log"))?;
            if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
                eprintln!(
                    "trained {} epochs: total loss {:.4e} -> {:.4e}; log in {}",
                    logs.len(),
                    first.total,
                    last.total,
                    log_path.display()
                );
            }
        }
        Command::Infer => {
            let recs = dataset(cfg)?;
            let m = model(cfg)?;
            let outs = recs
                .iter()
                .map(|r| {
                    let inp = ModelInput::from_network(&r.network, r.network.n_buses())?;
                    m.predict(&inp)
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(input("inference"))?;
            write_jsonl(out, &outs)?;
        }
        Command::Recover => {
            let recs = dataset(cfg)?;
            let states = predicted_states(cfg, &recs)?;
            let rows: Vec<RecoveredAngles> = recs
                .iter()
                .zip(&states)
                .enumerate()
                .map(|(i, (r, s))| {
                    let net = &r.network;
                    let a = bfs_par(
                        net,
                        &s.v,
                        &s.s_branch,
                        net.slack().unwrap_or(0),
                        net.ref_angle,
                        NeighborOrder::BranchOrder,
                    );
                    RecoveredAngles {
                        index: i,
                        max_cycle_residual: a.max_cycle_residual(),
                        theta: a.theta,
                        unassigned: a.unassigned,
                        singular_branches: a.singular_branches,
                    }
                })
                .collect();
            write_jsonl(out, &rows)?;
        }
        Command::Eval => {
            let recs = dataset(cfg)?;
            let states = predicted_states(cfg, &recs)?;
            let errs: Vec<_> = recs
                .iter()
                .zip(&states)
                .map(|(r, s)| sample_errors(s, &r.solution(), &r.network))
                .collect();
            let report = summarize(&errs, &cfg.thresholds).expect("dataset is nonempty");
            write_json(&mut *output(cfg.paths.report.as_deref())?, &report)?;
            if let Some(p) = out {
                let mut w = csv::Writer::from_path(p).map_err(input(&p.display().to_string()))?;
                for (i, e) in errs.iter().enumerate() {
                    w.serialize(PerSample {
                        index: i,
                        e_v: e.e_v,
                        e_theta: e.e_theta,
                        e_sl: e.e_sl,
                        e_ds: e.e_ds,
                    })
                    .map_err(input("output"))?;
                }
                w.flush().map_err(input("output"))?;
            }
        }
        Command::WarmstartBench { exact } => {
            let recs = dataset(cfg)?;
            let nets: Vec<Network> = recs.iter().map(|r| r.network.clone()).collect();
            let report = if *exact {
                warmstart_bench(&nets, &cfg.nr, |i, _| {
                    let s = recs[i].solution();
                    Ok(Init::Warm { v: s.v, theta: s.theta })
                })
            } else {
                let m = model(cfg)?;
                warmstart_bench(&nets, &cfg.nr, |_, net| model_init(&m, net))
            };
            eprintln!("{:<8} {:>12} {:>16} {:>10} {:>10}", "init", "converged", "mean iterations", "NR s", "init s");
            for (name, arm) in [("flat", &report.flat), ("warm", &report.warm)] {
                eprintln!(
                    "{:<8} {:>11.2}% {:>16.3} {:>10.4} {:>10.4}",
                    name,
                    arm.convergence_rate * 100.0,
                    arm.mean_iterations,
                    arm.nr_time,
                    arm.init_time
                );
            }
            write_json(&mut *output(out)?, &report)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.common);
    cfg.validate()?;
    let resolved = serde_json::to_string(&cfg).expect("config serializes");
    eprintln!("config: {resolved}");
    match cfg.seed {
        Some(s) => eprintln!("seed: {s}"),
        None => eprintln!("seed: none"),
    }
    // Ignored when a pool already exists, as in tests running commands in-process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers())
        .build_global();
    run_command(&cli.command, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("sampfa").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(
            &p,
            r#"{"seed": 3, "nr": {"tol": 1e-6}, "thresholds": {"mu_v": 0.02}, "schedule": {"stage1_epochs": 7}}"#,
        )
        .unwrap();
        let cli = parse(&["--config", p.to_str().unwrap(), "--seed", "9", "--mu-sl", "5", "solve"]);
        let mut cfg = RunConfig::load(&p).unwrap();
        cfg.apply(&cli.common);
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.nr.tol, 1e-6);
        assert_eq!(cfg.nr.max_iter, SolveOptions::default().max_iter);
        assert_eq!(cfg.thresholds.mu_v, 0.02);
        assert_eq!(cfg.thresholds.mu_sl, 5.0);
        assert_eq!(cfg.schedule.stage1_epochs, 7);
        assert_eq!(cfg.schedule.stage2_epochs, 150);
    }

    #[test]
    fn seed_is_required_for_dataset() {
        let cli = parse(&["--case", "ieee39", "--out", "/dev/null", "dataset"]);
        let err = execute(&cli).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn missing_files_are_input_errors() {
        let cli = parse(&["--case", "/nonexistent/case.json", "solve"]);
        assert_eq!(execute(&cli).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn non_convergence_is_a_numerical_error() {
        let cli = parse(&["--case", "ieee39", "--max-iter", "1", "--out", "/dev/null", "solve"]);
        assert_eq!(execute(&cli).unwrap_err().exit_code(), 2);
    }
}
