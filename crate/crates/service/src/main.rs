//! `dataprod` command line: serve the control API, run the loop headless,
//! or build a fixture database.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use dataprod_core::db::ConnectionProfile;
use dataprod_core::fixture::{load_script, parse_questions};
use dataprod_core::metrics::Contract;
use dataprod_core::orchestrator::{LoopEvent, Observer, Orchestrator, Verdict};
use dataprod_service::{report, router, App, Config};

#[derive(Parser)]
#[command(name = "dataprod", version, about = "Contract-driven data product improvement")]
struct Cli {
    /// TOML configuration file; `DATAPROD_*` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the HTTP control service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        /// Database to connect at startup.
        #[arg(long)]
        database: Option<PathBuf>,
        #[arg(long)]
        questions: Option<PathBuf>,
    },
    /// Run the loop to termination and print a report.
    Run {
        #[arg(long)]
        database: Option<PathBuf>,
        #[arg(long)]
        questions: Option<PathBuf>,
        /// Contract as JSON: `{"entries": [{"metric_id", "comparator", "target"}]}`.
        #[arg(long)]
        contract: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        version_log: Option<PathBuf>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Fixture databases.
    Fixture {
        #[command(subcommand)]
        command: FixtureCommand,
    },
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// Create a database by running a SQL script.
    Load {
        script: PathBuf,
        /// Database file to create; defaults to the script name with `.db`.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

struct Progress;

impl Observer for Progress {
    fn notify(&self, event: &LoopEvent) {
        if let LoopEvent::IterationCompleted { record } = event {
            eprintln!(
                "iteration {}: {} ({}) total gap {:.4}",
                record.iteration, record.proposal.tool_name, record.summary, record.total_gap_after
            );
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode, String> {
    let mut config = Config::load(cli.config.as_deref()).map_err(|e| e.to_string())?;
    match cli.command {
        Command::Serve { listen, database, questions } => {
            config.listen = listen.unwrap_or(config.listen);
            config.datasource.database = database.or(config.datasource.database);
            config.datasource.questions = questions.or(config.datasource.questions);
            serve(config)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { database, questions, contract, max_iterations, seed, version_log, json } => {
            let ds = &config.datasource;
            let database = database.or(ds.database.clone()).ok_or("no database given (--database or DATAPROD_DATABASE)")?;
            let mut run = config.run.run_config();
            if let Some(path) = contract {
                let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                run.contract = serde_json::from_str::<Contract>(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            run.max_iterations = max_iterations.unwrap_or(run.max_iterations);
            run.seed = seed.unwrap_or(run.seed);
            let mut builder = Orchestrator::builder(ConnectionProfile::sqlite(&database).with_timeout(ds.statement_timeout_ms))
                .observer(Arc::new(Progress));
            if let Some(path) = questions.or(ds.questions.clone()) {
                let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                builder = builder.questions(parse_questions(&text).map_err(|e| e.to_string())?);
            }
            if let Some(path) = version_log.or(ds.version_log.clone()) {
                builder = builder.version_log(path);
            }
            let mut orch = builder.connect().map_err(|e| e.to_string())?;
            let report = orch.run_loop(&run).map_err(|e| e.to_string())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
            } else {
                print!("{}", report::render(&report));
            }
            Ok(if matches!(report.verdict, Verdict::Error { .. }) { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Fixture { command: FixtureCommand::Load { script, output } } => {
            let output = output.unwrap_or_else(|| script.with_extension("db"));
            let text = std::fs::read_to_string(&script).map_err(|e| format!("{}: {e}", script.display()))?;
            load_script(&text, &output).map_err(|e| e.to_string())?;
            println!("{}", output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn serve(config: Config) -> Result<(), String> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&config.listen).await.map_err(|e| format!("{}: {e}", config.listen))?;
        let app = App::new(config);
        if let Some(summary) = app.connect_configured().await.map_err(|e| format!("{}: {}", e.code, e.message))? {
            tracing::info!(tables = summary.datasource.tables.len(), questions = summary.question_count, "connected");
        }
        tracing::info!(address = %listener.local_addr().map_err(|e| e.to_string())?, "listening");
        let shutdown = app.clone();
        axum::serve(listener, router(app.clone()))
            .with_graceful_shutdown(async move {
                let _ = tokio::signal::ctrl_c().await;
                shutdown.shutdown().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}
