//! `hetsplit` command-line entry point.
//!
//! Exit status: 0 on success, 1 when a check fails or a run errors, 2 on
//! bad flags or an invalid config.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hetsplit::checks::{self, GRAD_TOLERANCE, HAA_NOISE_FLOOR, NAA_TOLERANCE};
use hetsplit::config::parse_config;
use hetsplit::importance::ImportanceTable;
use hetsplit::metrics;
use hetsplit::model::WeightId;
use hetsplit::net;
use hetsplit::orchestrator::{run_experiment, ExperimentConfig, ExperimentOutcome, Planner};
use hetsplit::planner::{format_assignment, RoundBudgets};

#[derive(Parser)]
#[command(name = "hetsplit", version, about = "Heterogeneous split-LoRA fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Clients and server in one process.
    Sim,
    /// Wait for `n_clients` clients on `--listen`.
    NetServer,
    /// Join a server at `--connect`.
    NetClient,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment and write the metrics CSV.
    Run {
        /// Experiment config (flat TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sim")]
        mode: Mode,
        /// Address the server listens on.
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Address of the server a client joins.
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
    },
    /// Plan one round for given budgets and importance numerators.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Client budgets, one per client; the config's round-1 budgets
        /// when omitted.
        #[arg(long = "client-budget", value_delimiter = ',')]
        client_budgets: Vec<f64>,
        #[arg(long = "server-budget")]
        server_budget: Option<f64>,
        /// Importance numerators as `<block><kind>=<value>`, e.g. `0Q=2.5`;
        /// unlisted weights get 0.
        #[arg(long = "importance", value_delimiter = ',')]
        importance: Vec<String>,
    },
    /// NAA exactness and HAA noise suites.
    AggCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Finite-difference gradient suite on a 2-block, d_model = 8 model.
    GradCheck {
        /// Number of random models.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: 1, error: e.into() }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn load_config(path: Option<&Path>) -> std::result::Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => parse_config(p).map_err(|e| usage(e.into())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_summary(outcome: &ExperimentOutcome, elapsed: std::time::Duration) {
    let s = &outcome.summary;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    eprintln!(
        "rounds {}  initial ppl {:.4}  final ppl {:.4}  re-plans {}  budget violations {}  ({:.2?})",
        s.rounds,
        mean(&s.initial_ppl),
        mean(&s.final_ppl),
        s.replan_count,
        s.violation_count,
        elapsed
    );
}

fn write_metrics(out: Option<&Path>, outcome: &ExperimentOutcome) -> Result<()> {
    match out {
        Some(path) => metrics::emit_csv(path, &outcome.reports).with_context(|| format!("writing {}", path.display())),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            metrics::write_csv(&mut lock, &outcome.reports)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn run(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mode: Mode,
    listen: &str,
    connect: &str,
) -> std::result::Result<(), Failure> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.into()))?;
    let started = Instant::now();
    match mode {
        Mode::Sim => {
            let outcome = run_experiment(cfg)?;
            write_metrics(out.as_deref(), &outcome)?;
            print_summary(&outcome, started.elapsed());
        }
        Mode::NetServer => {
            let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
            eprintln!("listening on {}, waiting for {} clients", listener.local_addr()?, cfg.n_clients);
            let outcome = net::serve(cfg, &listener)?;
            write_metrics(out.as_deref(), &outcome)?;
            print_summary(&outcome, started.elapsed());
        }
        Mode::NetClient => {
            if out.is_some() {
                return Err(usage(anyhow::anyhow!("--out is only meaningful for sim and net-server modes")));
            }
            let stream = TcpStream::connect(connect).with_context(|| format!("connecting to {connect}"))?;
            let seen = net::run_client(cfg, stream)?;
            let last = seen.losses.last().copied().unwrap_or(f64::NAN);
            eprintln!("client {} finished {} rounds, last loss {:.6}", seen.client_id, seen.losses.len(), last);
        }
    }
    Ok(())
}

fn parse_importance(items: &[String]) -> Result<BTreeMap<WeightId, f64>> {
    let mut out = BTreeMap::new();
    for item in items {
        let Some((id, v)) = item.split_once('=') else {
            bail!("importance entry {item:?} is not <weight>=<value>");
        };
        let id: WeightId = id.parse().map_err(|e: String| anyhow::anyhow!("importance entry {item:?}: {e}"))?;
        let v: f64 = v.trim().parse().with_context(|| format!("importance entry {item:?}"))?;
        if !(v >= 0.0 && v.is_finite()) {
            bail!("importance entry {item:?}: value must be finite and non-negative");
        }
        out.insert(id, v);
    }
    Ok(out)
}

fn plan(
    config: Option<PathBuf>,
    client_budgets: Vec<f64>,
    server_budget: Option<f64>,
    importance: Vec<String>,
) -> std::result::Result<(), Failure> {
    let mut cfg = load_config(config.as_deref())?;
    let given = parse_importance(&importance).map_err(usage)?;
    let n_blocks = cfg.model.n_blocks;
    if let Some(id) = given.keys().find(|id| id.block >= n_blocks) {
        return Err(usage(anyhow::anyhow!("importance for {id}, but the model has {n_blocks} blocks")));
    }
    let mut budgets = cfg.budgets_at(1)?;
    if !client_budgets.is_empty() {
        budgets.clients = client_budgets;
        cfg.n_clients = budgets.clients.len();
    }
    if let Some(s) = server_budget {
        budgets.server = s;
    }
    if let Some(b) = budgets.clients.iter().chain([&budgets.server]).find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(usage(anyhow::anyhow!("budgets must be finite and non-negative, got {b}")));
    }
    let table = ImportanceTable::from_numerators(
        WeightId::all(n_blocks).map(|id| (id, given.get(&id).copied().unwrap_or(0.0))),
        cfg.total_rounds,
    );
    let mut planner = Planner::with_table(&cfg, table)?;
    let decision = planner.decide(RoundBudgets {
        clients: budgets.clients.clone(),
        server: budgets.server,
    })?;
    let p = &decision.plan;
    let cm = cfg.cost_model();
    println!("split {}", p.split.j());
    for (n, a) in p.client_assignments.iter().enumerate() {
        println!(
            "client {n}  budget {:.1}  cost {:.1}  ranks {}",
            budgets.clients[n],
            p.client_cost(n, n_blocks, &cm)?,
            format_assignment(a)
        );
    }
    println!(
        "server  budget {:.1}  cost {:.1}  ranks {}",
        budgets.server,
        p.server_cost(n_blocks, &cm)?,
        format_assignment(&p.server_assignment)
    );
    println!("I_g {:.6}", p.global_importance);
    for v in p.violations(n_blocks, &budgets, &cm)? {
        let who = v.client.map_or("server".to_string(), |c| format!("client {c}"));
        println!("infeasible: {who} base cost {:.1} exceeds budget {:.1}", v.cost, v.budget);
    }
    Ok(())
}

fn agg_check(trials: usize, seed: u64) -> std::result::Result<(), Failure> {
    let naa = checks::naa_exactness(trials, seed)?;
    let haa = checks::haa_noise(trials.clamp(1, 100), seed)?;
    let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} NAA exactness: {} trials, max error {:.3e} (tolerance {NAA_TOLERANCE:e}), {:.2?}",
        mark(naa.passed()),
        naa.trials,
        naa.max_error,
        naa.elapsed
    );
    println!(
        "{} HAA noise: {}/{} trials deviate by more than {HAA_NOISE_FLOOR} (min {:.3e}); mixed ranks {}",
        mark(haa.passed()),
        haa.noisy,
        haa.trials,
        haa.min_deviation,
        if haa.rejects_mixed_ranks { "rejected" } else { "accepted" }
    );
    if naa.passed() && haa.passed() {
        Ok(())
    } else {
        Err(anyhow::anyhow!("aggregation checks failed").into())
    }
}

fn grad_check(seeds: usize, seed: u64) -> std::result::Result<(), Failure> {
    let started = Instant::now();
    let reports = checks::grad_check(seeds, seed)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        worst = worst.max(r.max());
        println!(
            "{} seed {:>3}: adapter {:.2e}  base {:.2e}  cut {:.2e}",
            if r.max() <= GRAD_TOLERANCE { "PASS" } else { "FAIL" },
            r.seed,
            r.adapter,
            r.base,
            r.cut
        );
    }
    println!("worst relative error {worst:.3e} over {} seeds ({:.2?})", reports.len(), started.elapsed());
    if worst <= GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(anyhow::anyhow!("gradient check exceeded {GRAD_TOLERANCE:e}").into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            mode,
            listen,
            connect,
        } => run(config, seed, out, mode, &listen, &connect),
        Command::Plan {
            config,
            client_budgets,
            server_budget,
            importance,
        } => plan(config, client_budgets, server_budget, importance),
        Command::AggCheck { trials, seed } => agg_check(trials, seed),
        Command::GradCheck { seeds, seed } => grad_check(seeds, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
