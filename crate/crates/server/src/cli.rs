//! `escalate` subcommands. Exit codes: 0 success, 1 usage, 2 data or
//! validation problem, 3 runtime failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use escalate_core::evaluation::{evaluate, split_holdout, EvalReport};
use escalate_core::features::build_training_set;
use escalate_core::forest::{deserialize_model, serialize_model, train_forest};
use escalate_core::ingestion::{generate_mock_repository, load_repository, write_repository};
use escalate_core::model::timestamp;
use escalate_core::scoring::{read_snapshots, score_all, write_snapshots};
use escalate_core::{ForestModel, MockConfig, RepositorySnapshot, Store, TicketState, TrainConfig};

use crate::api::{router, AppState};
use crate::runner::{system_clock, ScoringRunner};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "escalate", version, about = "Escalation risk scoring for support tickets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic ticket repository.
    Mockgen(MockgenArgs),
    /// Train a forest on every resolved ticket.
    Train(TrainArgs),
    /// Report holdout accuracy, AUC and confusion matrix.
    Eval(EvalArgs),
    /// Score open tickets into a snapshot file.
    Score(ScoreArgs),
    /// Run the HTTP API with interval scoring.
    Serve(ServeArgs),
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if r > 0.0 && r < 1.0 {
        Ok(r)
    } else {
        Err(format!("{r} must lie strictly between 0 and 1"))
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if r > 0.0 && r <= 1.0 {
        Ok(r)
    } else {
        Err(format!("{r} must lie in (0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct MockgenArgs {
    #[arg(long, env = "ESCALATE_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 150, value_parser = clap::value_parser!(u64).range(1..))]
    pub customers: u64,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub tickets: u64,
    #[arg(long, default_value_t = 0.3, value_parser = parse_rate)]
    pub rate: f64,
    /// Days of history to simulate.
    #[arg(long, default_value_t = 365, value_parser = clap::value_parser!(u32).range(1..))]
    pub horizon: u32,
    #[arg(long, env = "ESCALATE_DATA")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForestArgs {
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub trees: u64,
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    pub depth: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub min_leaf: u64,
    #[arg(long, env = "ESCALATE_SEED", default_value_t = 42)]
    pub seed: u64,
}

impl ForestArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            n_trees: self.trees as usize,
            max_depth: self.depth as usize,
            min_samples_leaf: self.min_leaf as usize,
            features_per_split: None,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "ESCALATE_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "ESCALATE_MODEL")]
    pub out: PathBuf,
    #[command(flatten)]
    pub forest: ForestArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "ESCALATE_DATA")]
    pub data: PathBuf,
    /// Evaluate this model instead of training one on the non-holdout rows.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3, value_parser = parse_fraction)]
    pub holdout_fraction: f64,
    #[command(flatten)]
    pub forest: ForestArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, env = "ESCALATE_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "ESCALATE_MODEL")]
    pub model: PathBuf,
    /// Earlier snapshot file; supplies previous_risk and delta.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Scoring instant; defaults to the latest event in the data.
    #[arg(long, value_parser = timestamp::parse)]
    pub as_of: Option<escalate_core::Timestamp>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ESCALATE_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "ESCALATE_MODEL")]
    pub model: PathBuf,
    #[arg(long, env = "ESCALATE_STORE")]
    pub store: PathBuf,
    #[arg(long, env = "ESCALATE_BIND", default_value = "127.0.0.1")]
    pub bind: std::net::IpAddr,
    /// 0 picks a free port.
    #[arg(long, env = "ESCALATE_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Seconds between scoring runs; 0 disables interval scoring.
    #[arg(long, env = "ESCALATE_INTERVAL", default_value_t = 900)]
    pub interval: u64,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn data(message: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parses `args` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Mockgen(a) => mockgen(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Score(a) => score(&a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_data(path: &Path) -> Result<RepositorySnapshot, CliError> {
    let report = load_repository(path).map_err(CliError::data)?;
    if !report.rejects.is_empty() {
        eprintln!("warning: rejected {} line(s) of {}", report.rejects.len(), path.display());
        for r in report.rejects.iter().take(5) {
            eprintln!("  line {}: {}", r.line_number, r.reason);
        }
    }
    if report.snapshot.is_empty() {
        return Err(CliError::data(format!("{} holds no valid tickets", path.display())));
    }
    Ok(report.snapshot)
}

fn load_model(path: &Path) -> Result<ForestModel, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    deserialize_model(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult {
    let fail = |e: std::io::Error| CliError::runtime(format!("cannot write {}: {e}", path.display()));
    let mut out = BufWriter::new(File::create(path).map_err(fail)?);
    write(&mut out).map_err(fail)?;
    out.flush().map_err(fail)
}

fn mockgen(a: &MockgenArgs) -> CliResult {
    let config = MockConfig {
        seed: a.seed,
        n_customers: a.customers as usize,
        n_tickets: a.tickets as usize,
        horizon_days: a.horizon,
        base_escalation_rate: a.rate,
    };
    let snapshot = generate_mock_repository(&config).map_err(|e| CliError {
        code: EXIT_USAGE,
        message: e.to_string(),
    })?;
    write_file(&a.out, |w| write_repository(&snapshot, w).map_err(std::io::Error::other))?;
    let count = |s: TicketState| snapshot.tickets.values().filter(|t| t.state == s).count();
    println!("tickets: {}", snapshot.len());
    println!("open: {}", count(TicketState::Open));
    println!("closed: {}", count(TicketState::Closed));
    println!("escalated: {}", count(TicketState::Escalated));
    println!("wrote: {}", a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult {
    let snapshot = load_data(&a.data)?;
    let vectors = build_training_set(&snapshot).map_err(CliError::data)?;
    let model = train_forest(&vectors, &a.forest.config()).map_err(CliError::data)?;
    let positives = vectors.iter().filter(|v| v.label == Some(true)).count();
    write_file(&a.out, |w| w.write_all(&serialize_model(&model)))?;
    println!("rows: {}", vectors.len());
    println!("escalated: {positives}");
    println!("not_escalated: {}", vectors.len() - positives);
    println!("trees: {}", model.trees.len());
    println!("model_version: {}", model.model_version);
    println!("wrote: {}", a.out.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    let c = &r.confusion;
    println!("rows: {}", r.rows);
    println!("escalated: {}", r.positives);
    println!("accuracy: {:.4}", r.accuracy);
    println!("auc: {:.4}", r.auc);
    println!("confusion: tp={} fp={} tn={} fn={}", c.true_positive, c.false_positive, c.true_negative, c.false_negative);
}

fn eval(a: &EvalArgs) -> CliResult {
    let snapshot = load_data(&a.data)?;
    let vectors = build_training_set(&snapshot).map_err(CliError::data)?;
    let (train_rows, holdout) = split_holdout(&vectors, a.holdout_fraction, a.forest.seed).map_err(CliError::data)?;
    let model = match &a.model {
        Some(path) => load_model(path)?,
        None => train_forest(&train_rows, &a.forest.config()).map_err(CliError::data)?,
    };
    let report = evaluate(&model, &holdout).map_err(CliError::data)?;
    println!("model_version: {}", model.model_version);
    print_report(&report);
    Ok(())
}

fn score(a: &ScoreArgs) -> CliResult {
    let snapshot = load_data(&a.data)?;
    let model = load_model(&a.model)?;
    let history = match &a.history {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
            read_snapshots(BufReader::new(file)).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        }
        None => Vec::new(),
    };
    let as_of = a.as_of.unwrap_or(snapshot.loaded_at);
    let snapshots = score_all(&model, &snapshot, &history, as_of).map_err(CliError::data)?;
    write_file(&a.out, |w| write_snapshots(&snapshots, w))?;
    println!("scored: {}", snapshots.len());
    println!("with_delta: {}", snapshots.iter().filter(|s| s.delta.is_some()).count());
    println!("as_of: {}", timestamp::format(&as_of));
    println!("model_version: {}", model.model_version);
    println!("wrote: {}", a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let repo = Arc::new(load_data(&a.data)?);
    let model = Arc::new(load_model(&a.model)?);
    let store = Arc::new(Store::open(&a.store, Arc::clone(&repo)).map_err(CliError::data)?);
    let clock = system_clock();
    let runner = Arc::new(ScoringRunner::new(Arc::clone(&store), Some(model), Arc::clone(&clock)));
    let app = router(AppState::new(store, Arc::clone(&runner), clock));

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    rt.block_on(async move {
        let addr = SocketAddr::new(a.bind, a.port);
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(CliError::runtime)?;
        println!("listening on http://{local}");
        if a.interval > 0 {
            let period = Duration::from_secs(a.interval);
            tokio::spawn(async move {
                let mut ticks = tokio::time::interval(period);
                loop {
                    ticks.tick().await;
                    match runner.trigger().await {
                        Ok(s) => println!("scored {} tickets in {}", s.scored_count, s.run_id),
                        Err(e) => eprintln!("interval scoring failed: {e}"),
                    }
                }
            });
        }
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(CliError::runtime)
    })
}
