//! Connected session and the commands that change it. Reads go through
//! the published snapshot; writes hold the orchestrator lock and are
//! guarded by the run control's phase machine.

use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;

use dataprod_core::db::ConnectionProfile;
use dataprod_core::fixture::{parse_questions, PredefinedQuestion};
use dataprod_core::metrics::{Contract, GapVector, MetricValue};
use dataprod_core::orchestrator::{
    ApprovalMode, Decision, DataSourceSummary, Orchestrator, OrchestratorError, PendingApproval, Phase, Published,
    RunConfig, RunControl, StepOutcome, TransitionError,
};
use dataprod_core::state::ScopeLevel;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::config::Config;
use crate::error::{ApiError, ErrorBody};
use crate::events::EventHub;

pub struct Session {
    orch: Arc<Mutex<Orchestrator>>,
    pub control: Arc<RunControl>,
    pub published: Published,
}

impl Session {
    fn lock(&self) -> MutexGuard<'_, Orchestrator> {
        self.orch.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Fails with an invalid-transition error while a loop or step owns the
    /// orchestrator.
    fn ensure_inactive(&self, action: &'static str) -> Result<(), TransitionError> {
        let phase = self.control.phase();
        if phase.is_active() {
            return Err(TransitionError { action, phase });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectRequest {
    #[serde(flatten)]
    pub profile: ConnectionProfile,
    /// Path of a JSON questions file readable by the service.
    #[serde(default)]
    pub questions_file: Option<String>,
    #[serde(default)]
    pub questions: Option<Vec<PredefinedQuestion>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectSummary {
    pub datasource: DataSourceSummary,
    pub question_count: usize,
    pub metrics: Vec<MetricValue>,
}

/// Overrides for the configured loop defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunRequest {
    pub contract: Option<Contract>,
    pub max_iterations: Option<u32>,
    pub approval_mode: Option<ApprovalMode>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunAction {
    Start,
    Pause,
    Resume,
    Stop,
    Step,
}

pub struct App {
    pub config: Config,
    pub hub: Arc<EventHub>,
    session: RwLock<Option<Arc<Session>>>,
    connecting: tokio::sync::Mutex<()>,
    runner: Mutex<Option<JoinHandle<()>>>,
    last_error: Arc<Mutex<Option<ErrorBody>>>,
    shutdown: watch::Sender<bool>,
}

impl App {
    pub fn new(config: Config) -> Arc<Self> {
        let hub = EventHub::new(config.event_buffer);
        Arc::new(Self {
            config,
            hub,
            session: RwLock::new(None),
            connecting: tokio::sync::Mutex::new(()),
            runner: Mutex::new(None),
            last_error: Arc::new(Mutex::new(None)),
            shutdown: watch::channel(false).0,
        })
    }

    pub fn session(&self) -> Result<Arc<Session>, ApiError> {
        self.session.read().unwrap_or_else(|e| e.into_inner()).clone().ok_or_else(ApiError::not_connected)
    }

    pub fn phase(&self) -> Option<Phase> {
        self.session().ok().map(|s| s.control.phase())
    }

    pub fn last_error(&self) -> Option<ErrorBody> {
        self.last_error.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Resolves once [`App::shutdown`] has been called.
    pub fn shutdown_signal(&self) -> impl std::future::Future<Output = ()> + Send + 'static {
        let mut rx = self.shutdown.subscribe();
        async move {
            let _ = rx.wait_for(|stop| *stop).await;
        }
    }

    /// Stops any active run, waits for its thread and ends event streams.
    pub async fn shutdown(&self) {
        if let Ok(s) = self.session() {
            let _ = s.control.stop();
        }
        self.join_run().await;
        self.shutdown.send_replace(true);
    }

    /// Waits for the background run, if any, to finish.
    pub async fn join_run(&self) {
        let handle = self.runner.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(h) = handle {
            let _ = tokio::task::spawn_blocking(move || h.join()).await;
        }
    }

    /// Connects the data source named in the configuration, if any.
    pub async fn connect_configured(&self) -> Result<Option<ConnectSummary>, ApiError> {
        let ds = &self.config.datasource;
        let Some(db) = &ds.database else { return Ok(None) };
        let request = ConnectRequest {
            profile: ConnectionProfile::sqlite(db).with_timeout(ds.statement_timeout_ms),
            questions_file: ds.questions.as_ref().map(|p| p.display().to_string()),
            questions: None,
        };
        self.connect(request).await.map(Some)
    }

    /// Replaces the session with a freshly connected orchestrator. The old
    /// session is claimed for the duration so no run can start on it.
    pub async fn connect(&self, request: ConnectRequest) -> Result<ConnectSummary, ApiError> {
        let _serial = self.connecting.lock().await;
        let old = self.session().ok();
        let restore = match &old {
            Some(s) => Some(s.control.begin_step().map_err(|e| {
                ApiError::conflict(format!("cannot connect a data source while a run is {}", e.phase.as_str()))
            })?),
            None => None,
        };
        let hub = self.hub.clone();
        let version_log = self.config.datasource.version_log.clone();
        let built = tokio::task::spawn_blocking(move || build(request, version_log.as_deref(), hub))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))
            .and_then(|r| r);
        match built {
            Ok(session) => {
                let summary = {
                    let o = session.lock();
                    ConnectSummary {
                        datasource: o.datasource().clone(),
                        question_count: o.state().question_count(),
                        metrics: session
                            .published
                            .read()
                            .metrics
                            .iter()
                            .filter(|v| v.scope.level == ScopeLevel::Database)
                            .cloned()
                            .collect(),
                    }
                };
                *self.session.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(session));
                if let Some(s) = &old {
                    s.control.finish();
                }
                *self.last_error.lock().unwrap_or_else(|e| e.into_inner()) = None;
                Ok(summary)
            }
            Err(e) => {
                if let (Some(s), Some(r)) = (&old, restore) {
                    s.control.end_step(r);
                }
                Err(e)
            }
        }
    }

    fn run_config(&self, session: &Session, request: RunRequest) -> RunConfig {
        let defaults = &self.config.run;
        let contract = request
            .contract
            .or_else(|| session.published.read().state.contract().cloned())
            .unwrap_or_else(|| defaults.contract.clone());
        RunConfig {
            contract,
            max_iterations: request.max_iterations.unwrap_or(defaults.max_iterations),
            approval_mode: request.approval_mode.unwrap_or(defaults.approval_mode),
            seed: request.seed.unwrap_or(defaults.seed),
        }
    }

    pub async fn set_contract(&self, contract: Contract) -> Result<GapVector, ApiError> {
        let s = self.session()?;
        blocking(move || {
            s.ensure_inactive("change the contract")?;
            Ok(s.lock().set_contract(contract)?)
        })
        .await
    }

    /// Validates the configuration, claims the run control and starts the
    /// loop on its own thread.
    pub async fn start(&self, request: RunRequest) -> Result<RunConfig, ApiError> {
        let s = self.session()?;
        let config = self.run_config(&s, request);
        let errors = self.last_error.clone();
        let (session, cfg) = (s.clone(), config.clone());
        let handle = blocking(move || {
            session.ensure_inactive("start a run")?;
            let orch = session.orch.clone();
            {
                let o = session.lock();
                if cfg.max_iterations == 0 {
                    return Err(OrchestratorError::InvalidConfig("max_iterations must be at least 1".into()).into());
                }
                cfg.contract.validate(o.metric_registry()).map_err(OrchestratorError::from)?;
                session.control.begin()?;
            }
            let spawned = std::thread::Builder::new().name("dataprod-loop".into()).spawn(move || {
                let mut o = orch.lock().unwrap_or_else(|e| e.into_inner());
                match o.run_claimed(&cfg) {
                    Ok(report) => {
                        tracing::info!(verdict = report.verdict.name(), iterations = report.iterations.len(), "run finished");
                        *errors.lock().unwrap_or_else(|e| e.into_inner()) = None;
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "run failed");
                        *errors.lock().unwrap_or_else(|e| e.into_inner()) =
                            Some(ErrorBody { code: e.code().into(), message: e.to_string() });
                    }
                }
            });
            spawned.map_err(|e| {
                session.control.finish();
                ApiError::internal(e.to_string())
            })
        })
        .await?;
        let previous = self.runner.lock().unwrap_or_else(|e| e.into_inner()).replace(handle);
        if let Some(p) = previous {
            let _ = tokio::task::spawn_blocking(move || p.join()).await;
        }
        Ok(config)
    }

    /// Runs exactly one iteration on the caller's behalf.
    pub async fn step(&self, request: RunRequest) -> Result<StepOutcome, ApiError> {
        let s = self.session()?;
        let config = self.run_config(&s, request);
        blocking(move || {
            s.ensure_inactive("step")?;
            Ok(s.lock().step(&config)?)
        })
        .await
    }

    pub fn control(&self, action: RunAction) -> Result<Phase, ApiError> {
        let s = self.session()?;
        match action {
            RunAction::Pause => s.control.pause()?,
            RunAction::Resume => s.control.resume()?,
            RunAction::Stop => s.control.stop()?,
            RunAction::Start | RunAction::Step => return Err(ApiError::bad_request("not a control action")),
        }
        Ok(s.control.phase())
    }

    pub fn pending(&self) -> Result<Option<PendingApproval>, ApiError> {
        Ok(self.session()?.control.desk().pending())
    }

    pub fn decide(&self, iteration: u32, decision: Decision, actor: &str) -> Result<(), ApiError> {
        Ok(self.session()?.control.desk().resolve(iteration, decision, actor)?)
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn build(request: ConnectRequest, version_log: Option<&Path>, hub: Arc<EventHub>) -> Result<Session, ApiError> {
    let mut questions = request.questions.unwrap_or_default();
    if let Some(path) = &request.questions_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ApiError::new(axum::http::StatusCode::UNPROCESSABLE_ENTITY, "invalid_questions", format!("cannot read `{path}`: {e}")))?;
        questions.extend(parse_questions(&text)?);
    }
    let mut builder = Orchestrator::builder(request.profile).questions(questions).observer(hub);
    if let Some(p) = version_log {
        builder = builder.version_log(p);
    }
    let orch = builder.connect()?;
    Ok(Session { control: orch.control(), published: orch.published(), orch: Arc::new(Mutex::new(orch)) })
}
