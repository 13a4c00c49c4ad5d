//! A running peer: listeners, connection pool, handlers, heartbeats, anti-entropy
//! sync, and the submit path.
//!
//! The submitter beacons planners on slot `(task, 0, 0)` and sends each chosen
//! planner a Task on its chain's planning slot `(task, chain, 0)`. That planner
//! coordinates the chain: it plans, beacons executors step by step, and answers
//! with a TaskResult holding the chain's final answer and step scores. The
//! submitter votes over those results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::{Duration, Instant};

use agora_core::engine::Engine;
use agora_core::events::{Event, EventKind, EventLog};
use agora_core::execution::{
    beacon_response, run_chain, serve_subtask, ChainConfig, ChainResult, DispatchError, Fabric,
    SelectionPolicy,
};
use agora_core::ledger::{
    AgentRecord, Ledger, LedgerConfig, LedgerLog, LedgerSnapshot, PeerAddress, Registration, Role,
};
use agora_core::matching::{cosine_score, KeywordTagger, RequirementTagger, Taxonomy};
use agora_core::planning::{
    plan_chain, solicit_planners, PlannerDirectory, PlannerSettings, PlanningError,
    TaskDescription,
};
use agora_core::protocol::{
    now_millis, read_frame, write_frame, AgentId, BeaconBody, BeaconResponseBody, Codec, Envelope,
    Identity, MsgType, Payload, Slot, TaskBody, TaskResultBody,
};
use agora_core::voting::{vote, Verdict, VoteError};
use async_trait::async_trait;
use futures::future::{join_all, BoxFuture};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;
use tokio::time::MissedTickBehavior;

use crate::config::{ConfigError, NodeConfig};
use crate::dispatch::{AuditLog, DispatchOutcome, DispatchTable, Handler};
use crate::ledger_task::LedgerHandle;
use crate::transport::{BoxStream, Listener, MemoryNetwork, TcpTransport, Transport};
use crate::wire::{self, ControlBody, ControlFrame, WireMessage};

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("engine unreachable: {0}")]
    Engine(String),
    #[error("cannot open {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("self-registration failed: {0}")]
    Registration(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SubmitError {
    #[error(transparent)]
    Planning(#[from] PlanningError),
    #[error("{source}; chain failures: {}", failures.join("; "))]
    Vote { source: VoteError, failures: Vec<String> },
    #[error("task deadline of {0:?} elapsed")]
    Deadline(Duration),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub verdict: Verdict,
    pub chains: Vec<ChainResult>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub agent_id: AgentId,
    pub address: PeerAddress,
    pub roles: BTreeSet<Role>,
    pub capability_vector: Vec<f64>,
    pub model_path: String,
    pub gpu_allocation: String,
    pub load: u32,
    pub ledger_records: usize,
    pub available_planners: usize,
    pub available_executors: usize,
    pub uptime_ms: u64,
}

/// Pieces a caller may inject instead of building them from the config.
#[derive(Clone)]
pub struct NodeEnv {
    pub transport: Arc<dyn Transport>,
    pub events: Option<EventLog>,
    pub tagger: Option<Arc<dyn RequirementTagger>>,
    pub engine: Option<Arc<dyn Engine>>,
}

impl NodeEnv {
    pub fn tcp() -> Self {
        Self {
            transport: Arc::new(TcpTransport),
            events: None,
            tagger: None,
            engine: None,
        }
    }

    pub fn memory(network: &MemoryNetwork) -> Self {
        Self {
            transport: Arc::new(network.clone()),
            ..Self::tcp()
        }
    }

    pub fn with_events(mut self, events: EventLog) -> Self {
        self.events = Some(events);
        self
    }

    pub fn with_tagger(mut self, tagger: Arc<dyn RequirementTagger>) -> Self {
        self.tagger = Some(tagger);
        self
    }

    pub fn with_engine(mut self, engine: Arc<dyn Engine>) -> Self {
        self.engine = Some(engine);
        self
    }
}

struct PendingResult {
    address: PeerAddress,
    tx: oneshot::Sender<TaskResultBody>,
}

type BeaconSink = mpsc::UnboundedSender<(AgentId, BeaconResponseBody)>;

pub struct NodeInner {
    me: Weak<NodeInner>,
    identity: Identity,
    config: NodeConfig,
    address: PeerAddress,
    taxonomy: Arc<Taxonomy>,
    codec: Codec,
    engine: Arc<dyn Engine>,
    tagger: Arc<dyn RequirementTagger>,
    settings: PlannerSettings,
    chain_config: ChainConfig,
    transport: Arc<dyn Transport>,
    ledger: LedgerHandle,
    events: EventLog,
    audit: AuditLog,
    table: DispatchTable,
    conns: Mutex<HashMap<PeerAddress, mpsc::UnboundedSender<Vec<u8>>>>,
    beacons: Mutex<HashMap<Slot, BeaconSink>>,
    results: Mutex<HashMap<(Slot, AgentId), PendingResult>>,
    load: AtomicU32,
    tasks: Mutex<JoinSet<()>>,
    stopping: AtomicBool,
    started: Instant,
}

pub async fn start_node(config: NodeConfig) -> Result<NodeHandle, StartupError> {
    start_node_with(config, NodeEnv::tcp()).await
}

pub async fn start_node_with(config: NodeConfig, env: NodeEnv) -> Result<NodeHandle, StartupError> {
    let taxonomy = Arc::new(config.taxonomy()?);
    let dimension = taxonomy.dimension();
    config.validate(dimension)?;
    let identity = config.identity()?;
    let engine = match env.engine {
        Some(e) => e,
        None => config
            .engine
            .build(&identity.agent_id().short(), &config.base_dir, taxonomy.clone())
            .map_err(|e| StartupError::Engine(e.to_string()))?,
    };
    engine
        .probe()
        .await
        .map_err(|e| StartupError::Engine(e.to_string()))?;
    let templates = config.prompt_templates()?;

    let events = match (env.events, &config.event_log) {
        (Some(e), _) => e,
        (None, Some(p)) => {
            let path = config.resolve(p);
            EventLog::with_file(&path).map_err(|source| StartupError::Io {
                path: path.display().to_string(),
                source,
            })?
        }
        (None, None) => EventLog::new(),
    };

    let mut listeners: Vec<Box<dyn Listener>> = Vec::new();
    for addr in std::iter::once(&config.listen).chain(&config.extra_listen) {
        let l = env.transport.bind(addr).await.map_err(|source| StartupError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        listeners.push(l);
    }
    let gateway = match &config.gateway {
        Some(g) => Some(
            tokio::net::TcpListener::bind((g.host.as_str(), g.port))
                .await
                .map_err(|source| StartupError::Bind {
                    addr: g.to_string(),
                    source,
                })?,
        ),
        None => None,
    };
    let address = listeners[0].local_addr();

    let ledger_config = LedgerConfig {
        dimension,
        ttl_ms: config.timing.liveness_ttl_ms,
    };
    let (ledger, log) = match &config.ledger_log {
        Some(p) => {
            let path = config.resolve(p);
            let io_err = |source| StartupError::Io {
                path: path.display().to_string(),
                source,
            };
            let ledger = LedgerLog::replay(&path, ledger_config).map_err(io_err)?;
            (ledger, Some(LedgerLog::open(&path).map_err(io_err)?))
        }
        None => (Ledger::new(ledger_config), None),
    };
    let (ledger, ledger_task) = LedgerHandle::spawn(ledger, log);

    let now = now_millis();
    let mut record = Registration {
        agent_id: identity.agent_id(),
        public_key: identity.public_key(),
        address: address.clone(),
        capability_vector: config.capability_vector.clone(),
        roles: config.roles.clone(),
        metadata: format!(
            "engine={};model_path={};gpu={}",
            engine.id(),
            config.model_path,
            config.gpu_allocation
        ),
        registered_at: now,
    }
    .sign(&identity)
    .map_err(|e| StartupError::Registration(e.to_string()))?;
    record.last_seen = now;
    ledger
        .register(record)
        .await
        .map_err(|e| StartupError::Registration(e.to_string()))?;

    let tagger = env
        .tagger
        .unwrap_or_else(|| Arc::new(KeywordTagger::new(taxonomy.clone())));
    let settings = PlannerSettings {
        templates,
        params: config.sampling,
        ..PlannerSettings::default()
    };
    let chain_config = ChainConfig {
        beacon_timeout: config.timing.beacon_timeout(),
        step_deadline: config.timing.step_deadline(),
        policy: config.selection.unwrap_or(SelectionPolicy::Score),
        ..ChainConfig::default()
    };

    let inner = Arc::new_cyclic(|me| NodeInner {
        me: me.clone(),
        identity,
        address,
        taxonomy,
        codec: Codec::new(dimension),
        engine,
        tagger,
        settings,
        chain_config,
        transport: env.transport,
        ledger,
        events,
        audit: AuditLog::default(),
        table: DispatchTable::standard(),
        conns: Mutex::new(HashMap::new()),
        beacons: Mutex::new(HashMap::new()),
        results: Mutex::new(HashMap::new()),
        load: AtomicU32::new(0),
        tasks: Mutex::new(JoinSet::new()),
        stopping: AtomicBool::new(false),
        started: Instant::now(),
        config,
    });

    inner.spawn(async move {
        let _ = ledger_task.await;
    });
    for listener in listeners {
        let node = inner.clone();
        inner.spawn(async move { node.accept_loop(listener).await });
    }
    let gateway_addr = match gateway {
        Some(listener) => {
            let addr = listener.local_addr().ok();
            let app = crate::gateway::router(inner.clone());
            inner.spawn(async move {
                if let Err(e) = axum::serve(listener, app).await {
                    tracing::warn!(error = %e, "gateway stopped");
                }
            });
            addr
        }
        None => None,
    };
    {
        let node = inner.clone();
        inner.spawn(async move { node.heartbeat_loop().await });
        let node = inner.clone();
        inner.spawn(async move { node.sync_loop().await });
    }
    tracing::info!(agent = %inner.identity.agent_id().short(), address = %inner.address, "node started");
    Ok(NodeHandle {
        inner,
        gateway_addr,
    })
}

impl NodeInner {
    fn arc(&self) -> Arc<NodeInner> {
        self.me.upgrade().expect("node alive while in use")
    }

    pub(crate) fn ledger(&self) -> &LedgerHandle {
        &self.ledger
    }

    pub(crate) fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn event_log(&self) -> &EventLog {
        &self.events
    }

    pub fn agent_id(&self) -> AgentId {
        self.identity.agent_id()
    }

    pub(crate) fn spawn(&self, fut: impl std::future::Future<Output = ()> + Send + 'static) {
        if self.stopping.load(Ordering::SeqCst) {
            return;
        }
        let mut set = self.tasks.lock().unwrap();
        while set.try_join_next().is_some() {}
        set.spawn(fut);
    }

    pub(crate) fn status(&self) -> NodeStatus {
        NodeStatus {
            agent_id: self.agent_id(),
            address: self.address.clone(),
            roles: self.config.roles.clone(),
            capability_vector: self.config.capability_vector.clone(),
            model_path: self.config.model_path.clone(),
            gpu_allocation: self.config.gpu_allocation.clone(),
            load: self.load.load(Ordering::SeqCst),
            ledger_records: self.ledger.snapshot().len(),
            available_planners: self.ledger.available(Role::Planner).len(),
            available_executors: self.ledger.available(Role::Executor).len(),
            uptime_ms: self.started.elapsed().as_millis() as u64,
        }
    }

    async fn accept_loop(self: Arc<Self>, mut listener: Box<dyn Listener>) {
        loop {
            match listener.accept().await {
                Ok(stream) => {
                    let node = self.clone();
                    self.spawn(async move { node.read_loop(stream, None).await });
                }
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            }
        }
    }

    /// Reads frames until the stream ends. `outbound` names the peer for
    /// connections we opened, so their loss can fail pending dispatches.
    async fn read_loop(
        self: Arc<Self>,
        mut stream: impl tokio::io::AsyncRead + Send + Unpin,
        outbound: Option<PeerAddress>,
    ) {
        loop {
            match read_frame(&mut stream).await {
                Ok(Some(bytes)) => self.on_frame(bytes).await,
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!(error = %e, "connection read failed");
                    break;
                }
            }
        }
        if let Some(addr) = outbound {
            self.on_disconnect(&addr);
        }
    }

    async fn on_frame(self: &Arc<Self>, bytes: Vec<u8>) {
        match wire::decode(&self.codec, &bytes) {
            Ok(WireMessage::Envelope(env)) => {
                self.table.dispatch(self, env).await;
            }
            Ok(WireMessage::Control(frame)) => self.on_control(frame).await,
            Err(e) => self.audit.record(None, None, format!("undecodable frame: {e}")),
        }
    }

    /// Feeds raw frame bytes through decode and dispatch, as a connection would.
    pub async fn deliver(self: &Arc<Self>, bytes: Vec<u8>) -> Option<DispatchOutcome> {
        match wire::decode(&self.codec, &bytes) {
            Ok(WireMessage::Envelope(env)) => Some(self.table.dispatch(self, env).await),
            Ok(WireMessage::Control(frame)) => {
                self.on_control(frame).await;
                None
            }
            Err(e) => {
                self.audit.record(None, None, format!("undecodable frame: {e}"));
                None
            }
        }
    }

    async fn on_control(self: &Arc<Self>, frame: ControlFrame) {
        let sender = frame.sender;
        match &frame.control {
            ControlBody::Sync { records, reply } => {
                // A joining peer is not in our ledger yet; its own self-signed
                // record in the snapshot vouches for its key.
                let key = self
                    .ledger
                    .get(&sender)
                    .or_else(|| {
                        records
                            .iter()
                            .find(|r| r.agent_id() == sender && r.validate(self.codec.dimension()).is_ok())
                            .cloned()
                    })
                    .map(|r| r.registration.public_key);
                let Some(key) = key else {
                    self.audit.record(Some(sender), None, "sync from unknown sender");
                    return;
                };
                if !frame.verify(&key).unwrap_or(false) {
                    self.audit.record(Some(sender), None, "control frame signature does not verify");
                    return;
                }
                let snapshot = LedgerSnapshot {
                    records: records.iter().map(|r| (r.agent_id(), r.clone())).collect(),
                    version: 0,
                };
                if let Some(report) = self.ledger.merge(snapshot).await {
                    for (id, why) in report.rejected {
                        self.audit.record(Some(sender), None, format!("rejected record {}: {why}", id.short()));
                    }
                }
                if *reply {
                    if let (Some(rec), Some(bytes)) = (self.ledger.get(&sender), self.sync_bytes(false)) {
                        self.fan_out([rec.registration.address], bytes).await;
                    }
                }
            }
            ControlBody::Heartbeat { sent_at } => {
                let Some(rec) = self.ledger.get(&sender) else {
                    self.audit.record(Some(sender), None, "heartbeat from unknown sender");
                    return;
                };
                if !frame.verify(&rec.registration.public_key).unwrap_or(false) {
                    self.audit.record(Some(sender), None, "control frame signature does not verify");
                    return;
                }
                self.ledger.heartbeat(sender, *sent_at);
            }
        }
    }

    fn on_disconnect(&self, addr: &PeerAddress) {
        self.conns.lock().unwrap().remove(addr);
        // Dropping the senders wakes their waiters with an error.
        self.results.lock().unwrap().retain(|_, p| &p.address != addr);
    }

    /// Queues `bytes` on the connection to `addr`, opening it if needed.
    ///
    /// Boxed because the reader task it spawns can itself send, which makes
    /// the future type recursive.
    fn send_frame<'a>(&'a self, addr: &'a PeerAddress, bytes: Vec<u8>) -> BoxFuture<'a, io::Result<()>> {
        Box::pin(async move {
            if let Some(tx) = self.conns.lock().unwrap().get(addr).cloned() {
                if tx.send(bytes.clone()).is_ok() {
                    return Ok(());
                }
            }
            let stream: BoxStream = tokio::time::timeout(
                self.config.timing.connect_timeout(),
                self.transport.connect(addr),
            )
            .await
            .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, format!("connect to {addr} timed out")))??;

            let tx = {
                let mut conns = self.conns.lock().unwrap();
                match conns.get(addr).filter(|tx| !tx.is_closed()) {
                    // Lost a connect race; keep the established connection.
                    Some(existing) => existing.clone(),
                    None => {
                        let (tx, rx) = mpsc::unbounded_channel();
                        conns.insert(addr.clone(), tx.clone());
                        let (reader, writer) = tokio::io::split(stream);
                        let node = self.arc();
                        let peer = addr.clone();
                        self.spawn(async move { node.read_loop(reader, Some(peer)).await });
                        let node = self.arc();
                        let peer = addr.clone();
                        self.spawn(async move { node.write_loop(rx, writer, peer).await });
                        tx
                    }
                }
            };
            tx.send(bytes)
                .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, format!("connection to {addr} closed")))
        })
    }

    async fn write_loop(
        self: Arc<Self>,
        mut rx: mpsc::UnboundedReceiver<Vec<u8>>,
        mut writer: impl tokio::io::AsyncWrite + Send + Unpin,
        addr: PeerAddress,
    ) {
        while let Some(bytes) = rx.recv().await {
            if let Err(e) = write_frame(&mut writer, &bytes).await {
                tracing::debug!(peer = %addr, error = %e, "connection write failed");
                break;
            }
        }
        self.on_disconnect(&addr);
    }

    fn envelope(&self, slot: Slot, payload: Payload) -> Option<Vec<u8>> {
        let env = Envelope::signed(&self.identity, slot, payload, now_millis())
            .and_then(|e| self.codec.encode(&e));
        match env {
            Ok(bytes) => Some(bytes),
            Err(e) => {
                tracing::error!(error = %e, "cannot encode envelope");
                None
            }
        }
    }

    async fn send_to(&self, to: &AgentId, slot: Slot, payload: Payload) -> Result<(), String> {
        let rec = self
            .ledger
            .get(to)
            .ok_or_else(|| format!("{} is not in the ledger", to.short()))?;
        let bytes = self.envelope(slot, payload).ok_or("encoding failed")?;
        self.send_frame(&rec.registration.address, bytes)
            .await
            .map_err(|e| e.to_string())
    }

    fn control_bytes(&self, body: ControlBody) -> Option<Vec<u8>> {
        let frame = ControlFrame::signed(&self.identity, body)
            .and_then(|f| wire::encode(&self.codec, &WireMessage::Control(f)));
        match frame {
            Ok(bytes) => Some(bytes),
            Err(e) => {
                tracing::error!(error = %e, "cannot encode control frame");
                None
            }
        }
    }

    fn sync_bytes(&self, reply: bool) -> Option<Vec<u8>> {
        let records = self.ledger.snapshot().records.values().cloned().collect();
        self.control_bytes(ControlBody::Sync { records, reply })
    }

    /// Sends one already encoded frame to each address, concurrently.
    async fn fan_out(&self, addrs: impl IntoIterator<Item = PeerAddress>, bytes: Vec<u8>) {
        let sends = addrs.into_iter().map(|a| {
            let bytes = bytes.clone();
            async move {
                if let Err(e) = self.send_frame(&a, bytes).await {
                    tracing::debug!(peer = %a, error = %e, "control send failed");
                }
            }
        });
        join_all(sends).await;
    }

    /// Every known peer address plus the seeds, excluding our own.
    fn peer_addresses(&self) -> BTreeSet<PeerAddress> {
        let me = self.agent_id();
        self.ledger
            .snapshot()
            .records
            .values()
            .filter(|r| r.agent_id() != me)
            .map(|r| r.registration.address.clone())
            .chain(self.config.seeds.iter().cloned())
            .filter(|a| a != &self.address)
            .collect()
    }

    async fn heartbeat_loop(self: Arc<Self>) {
        let mut tick = tokio::time::interval(self.config.timing.heartbeat_interval());
        tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            self.heartbeat_once().await;
        }
    }

    async fn heartbeat_once(&self) {
        let now = now_millis();
        self.ledger.heartbeat(self.agent_id(), now);
        if let Some(bytes) = self.control_bytes(ControlBody::Heartbeat { sent_at: now }) {
            self.fan_out(self.peer_addresses(), bytes).await;
        }
    }

    async fn sync_loop(self: Arc<Self>) {
        // Seeds answer the first push with their own view, so a joining node
        // learns the network within one round trip.
        let seeds: Vec<_> = self.config.seeds.iter().filter(|a| **a != self.address).cloned().collect();
        if let Some(bytes) = self.sync_bytes(true) {
            self.fan_out(seeds, bytes).await;
        }
        let mut tick = tokio::time::interval(self.config.timing.sync_interval());
        tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
        tick.tick().await;
        loop {
            tick.tick().await;
            if let Some(bytes) = self.sync_bytes(false) {
                self.fan_out(self.peer_addresses(), bytes).await;
            }
        }
    }

    /// Executor side of a Task.
    async fn serve(&self, slot: &Slot, task: &TaskBody) -> TaskResultBody {
        if !self.config.roles.contains(&Role::Executor) {
            return TaskResultBody::failure();
        }
        let result = serve_subtask(
            self.engine.as_ref(),
            &self.settings.templates,
            self.settings.params,
            slot,
            task,
            &self.events,
        )
        .await;
        if !result.is_failure() {
            // Each node counts only its own contributions, so every counter has
            // a single writer and merging by max loses nothing.
            self.ledger.record_contribution(self.agent_id());
        }
        result
    }

    /// Planner side of a planning-slot Task: plan the chain, then coordinate it.
    async fn coordinate(&self, slot: &Slot, task: &TaskBody) -> TaskResultBody {
        if !self.config.roles.contains(&Role::Planner) {
            return TaskResultBody::failure();
        }
        let desc = TaskDescription {
            task_id: slot.task_id.clone(),
            text: task.subtask_text.clone(),
            options: None,
        };
        let work = async {
            let chain = plan_chain(
                &desc,
                self.engine.as_ref(),
                &self.settings,
                slot.chain_id,
                self.agent_id(),
                &self.events,
            )
            .await
            .map_err(|e| e.to_string())?;
            run_chain(self, &slot.task_id, chain, self.tagger.as_ref(), &self.chain_config)
                .await
                .map_err(|e| e.to_string())
        };
        match tokio::time::timeout(self.config.timing.task_deadline(), work).await {
            Ok(Ok(chain)) => TaskResultBody::success(chain.raw_answer, chain.per_step_scores),
            Ok(Err(reason)) => {
                tracing::warn!(task = %slot.task_id, chain = slot.chain_id, %reason, "chain failed");
                TaskResultBody::failure()
            }
            Err(_) => {
                tracing::warn!(task = %slot.task_id, chain = slot.chain_id, "chain deadline elapsed");
                TaskResultBody::failure()
            }
        }
    }

    pub async fn submit(&self, task: TaskDescription, chains: usize) -> Result<SubmitOutcome, SubmitError> {
        let deadline = self.config.timing.task_deadline();
        tokio::time::timeout(deadline, self.submit_inner(task, chains))
            .await
            .map_err(|_| SubmitError::Deadline(deadline))?
    }

    async fn submit_inner(&self, task: TaskDescription, chains: usize) -> Result<SubmitOutcome, SubmitError> {
        let task_id = task.task_id.clone();
        self.events.record(Event::new(EventKind::TaskSubmitted, &task_id));
        if chains == 0 {
            return Err(PlanningError::InvalidTask("at least one chain is required".into()).into());
        }
        task.validate()?;
        let requirement = self.taxonomy.planning_requirement();
        let planners = solicit_planners(
            self,
            &task,
            &requirement,
            chains,
            self.chain_config.beacon_timeout,
        )
        .await?;

        let user_input = task.user_input();
        let jobs = planners.iter().enumerate().map(|(i, planner)| {
            let chain_id = i as u32;
            let user_input = user_input.clone();
            let task_id = task_id.clone();
            let requirement = requirement.components().to_vec();
            async move {
                self.events.record(
                    Event::new(EventKind::ExecutorSelected, &task_id)
                        .chain(chain_id)
                        .agent(*planner),
                );
                let score = self
                    .ledger
                    .get(planner)
                    .and_then(|r| cosine_score(r.capability_vector(), &requirement).ok())
                    .map(|s| s.value())
                    .unwrap_or(0.0);
                let body = TaskBody {
                    subtask_text: user_input,
                    background: String::new(),
                    prior_results: Vec::new(),
                    remaining_chain: Vec::new(),
                    accumulated_scores: vec![score],
                };
                let slot = Slot::new(&task_id, chain_id, 0);
                let deadline = self.config.timing.task_deadline();
                match Fabric::dispatch(self, planner, &slot, &body, deadline).await {
                    Ok(r) if !r.is_failure() => Ok(ChainResult::new(chain_id, &r.final_answer, r.step_scores)),
                    Ok(_) => Err(format!("chain {chain_id}: planner {} reported failure", planner.short())),
                    Err(e) => Err(format!("chain {chain_id}: planner {}: {e}", planner.short())),
                }
            }
        });
        let mut results = Vec::new();
        let mut failures = Vec::new();
        for r in join_all(jobs).await {
            match r {
                Ok(c) => results.push(c),
                Err(f) => failures.push(f),
            }
        }
        let verdict = vote(&results).map_err(|source| SubmitError::Vote {
            source,
            failures: failures.clone(),
        })?;
        self.events.record(Event::new(EventKind::Verdict, &task_id));
        Ok(SubmitOutcome {
            verdict,
            chains: results,
            failures,
        })
    }

    /// Sends `beacon` on `slot` to `targets` and gathers replies until every
    /// reachable target answered or `timeout` elapsed.
    async fn gather_responses(
        &self,
        slot: &Slot,
        beacon: &BeaconBody,
        targets: &[AgentId],
        timeout: Duration,
    ) -> Vec<(AgentId, BeaconResponseBody)> {
        let Some(bytes) = self.envelope(slot.clone(), Payload::Beacon(beacon.clone())) else {
            return Vec::new();
        };
        let (tx, mut rx) = mpsc::unbounded_channel();
        self.beacons.lock().unwrap().insert(slot.clone(), tx);
        let deadline = tokio::time::Instant::now() + timeout;
        let sends = targets.iter().map(|id| {
            let bytes = bytes.clone();
            async move {
                let addr = self.ledger.get(id)?.registration.address;
                self.send_frame(&addr, bytes).await.ok().map(|_| *id)
            }
        });
        let reached: BTreeSet<AgentId> = join_all(sends).await.into_iter().flatten().collect();
        let mut got = BTreeMap::new();
        while got.len() < reached.len() {
            match tokio::time::timeout_at(deadline, rx.recv()).await {
                Ok(Some((id, body))) if reached.contains(&id) => {
                    self.events
                        .record(Event::at_slot(EventKind::ResponseRecv, slot).agent(id));
                    got.insert(id, body);
                }
                Ok(Some(_)) => {}
                _ => break,
            }
        }
        self.beacons.lock().unwrap().remove(slot);
        got.into_iter().collect()
    }

    async fn shutdown(&self) {
        self.stopping.store(true, Ordering::SeqCst);
        let mut set = std::mem::take(&mut *self.tasks.lock().unwrap());
        set.shutdown().await;
        self.conns.lock().unwrap().clear();
        self.results.lock().unwrap().clear();
        self.beacons.lock().unwrap().clear();
    }
}

#[async_trait]
impl Fabric for NodeInner {
    async fn available_executors(&self) -> Vec<AgentRecord> {
        self.ledger.available(Role::Executor)
    }

    async fn broadcast_beacon(
        &self,
        slot: &Slot,
        beacon: &BeaconBody,
        targets: &[AgentId],
        timeout: Duration,
    ) -> Vec<(AgentId, BeaconResponseBody)> {
        self.gather_responses(slot, beacon, targets, timeout).await
    }

    async fn dispatch(
        &self,
        executor: &AgentId,
        slot: &Slot,
        task: &TaskBody,
        deadline: Duration,
    ) -> Result<TaskResultBody, DispatchError> {
        let rec = self
            .ledger
            .get(executor)
            .ok_or_else(|| DispatchError::Unreachable(executor.short()))?;
        let key = (slot.clone(), *executor);
        let (tx, rx) = oneshot::channel();
        self.results.lock().unwrap().insert(
            key.clone(),
            PendingResult {
                address: rec.registration.address.clone(),
                tx,
            },
        );
        if let Err(e) = self.send_to(executor, slot.clone(), Payload::Task(task.clone())).await {
            self.results.lock().unwrap().remove(&key);
            return Err(DispatchError::Unreachable(format!("{}: {e}", executor.short())));
        }
        match tokio::time::timeout(deadline, rx).await {
            Ok(Ok(result)) => Ok(result),
            Ok(Err(_)) => Err(DispatchError::Unreachable(format!("{}: connection lost", executor.short()))),
            Err(_) => {
                self.results.lock().unwrap().remove(&key);
                Err(DispatchError::Timeout)
            }
        }
    }

    async fn record_contribution(&self, _executor: &AgentId) {
        // Executors count their own contributions; see `serve`.
    }

    fn events(&self) -> &EventLog {
        &self.events
    }
}

#[async_trait]
impl PlannerDirectory for NodeInner {
    async fn available_planners(&self) -> Vec<AgentRecord> {
        self.ledger.available(Role::Planner)
    }

    async fn solicit(
        &self,
        slot: &Slot,
        beacon: &BeaconBody,
        targets: &[AgentId],
        timeout: Duration,
    ) -> Vec<(AgentId, BeaconResponseBody)> {
        self.gather_responses(slot, beacon, targets, timeout).await
    }

    fn events(&self) -> &EventLog {
        &self.events
    }
}

struct BeaconHandler;
struct BeaconResponseHandler;
struct TaskHandler;
struct TaskResultHandler;

pub(crate) fn handlers() -> Vec<(MsgType, Arc<dyn Handler>)> {
    vec![
        (MsgType::Beacon, Arc::new(BeaconHandler)),
        (MsgType::BeaconResponse, Arc::new(BeaconResponseHandler)),
        (MsgType::Task, Arc::new(TaskHandler)),
        (MsgType::TaskResult, Arc::new(TaskResultHandler)),
    ]
}

#[async_trait]
impl Handler for BeaconHandler {
    async fn handle(&self, node: &Arc<NodeInner>, envelope: Envelope) {
        let Payload::Beacon(beacon) = envelope.payload else { return };
        let role = if envelope.slot.is_planning() {
            Role::Planner
        } else {
            Role::Executor
        };
        if !node.config.roles.contains(&role) {
            return;
        }
        let load = node.load.load(Ordering::SeqCst);
        let body = match beacon_response(&node.config.capability_vector, &beacon, load) {
            Ok(b) => b,
            Err(e) => {
                tracing::debug!(error = %e, "not answering beacon");
                return;
            }
        };
        let n = node.clone();
        node.spawn(async move {
            if let Err(e) = n
                .send_to(&envelope.sender, envelope.slot, Payload::BeaconResponse(body))
                .await
            {
                tracing::debug!(error = %e, "beacon response not delivered");
            }
        });
    }
}

#[async_trait]
impl Handler for BeaconResponseHandler {
    async fn handle(&self, node: &Arc<NodeInner>, envelope: Envelope) {
        let Payload::BeaconResponse(body) = envelope.payload else { return };
        if let Some(tx) = node.beacons.lock().unwrap().get(&envelope.slot) {
            let _ = tx.send((envelope.sender, body));
        }
    }
}

#[async_trait]
impl Handler for TaskHandler {
    async fn handle(&self, node: &Arc<NodeInner>, envelope: Envelope) {
        let Payload::Task(task) = envelope.payload else { return };
        let n = node.clone();
        node.spawn(async move {
            n.load.fetch_add(1, Ordering::SeqCst);
            let result = if envelope.slot.is_planning() {
                n.coordinate(&envelope.slot, &task).await
            } else {
                n.serve(&envelope.slot, &task).await
            };
            n.load.fetch_sub(1, Ordering::SeqCst);
            if let Err(e) = n
                .send_to(&envelope.sender, envelope.slot, Payload::TaskResult(result))
                .await
            {
                tracing::warn!(error = %e, "task result not delivered");
            }
        });
    }
}

#[async_trait]
impl Handler for TaskResultHandler {
    async fn handle(&self, node: &Arc<NodeInner>, envelope: Envelope) {
        let Payload::TaskResult(body) = envelope.payload else { return };
        let pending = node
            .results
            .lock()
            .unwrap()
            .remove(&(envelope.slot.clone(), envelope.sender));
        match pending {
            Some(p) => {
                let _ = p.tx.send(body);
            }
            None => tracing::debug!(slot = ?envelope.slot, "unsolicited or late task result"),
        }
    }
}

/// Owner's handle on a running node. Dropping it stops the node.
pub struct NodeHandle {
    inner: Arc<NodeInner>,
    gateway_addr: Option<SocketAddr>,
}

impl NodeHandle {
    pub fn agent_id(&self) -> AgentId {
        self.inner.agent_id()
    }

    pub fn address(&self) -> &PeerAddress {
        &self.inner.address
    }

    pub fn gateway_addr(&self) -> Option<SocketAddr> {
        self.gateway_addr
    }

    pub fn status(&self) -> NodeStatus {
        self.inner.status()
    }

    pub fn ledger(&self) -> Arc<LedgerSnapshot> {
        self.inner.ledger.snapshot()
    }

    pub fn events(&self) -> &EventLog {
        &self.inner.events
    }

    pub fn audit(&self) -> Vec<crate::dispatch::AuditEntry> {
        self.inner.audit.entries()
    }

    pub fn inner(&self) -> &Arc<NodeInner> {
        &self.inner
    }

    /// Resolves once this node's ledger satisfies `pred`.
    pub async fn wait_for_ledger(&self, pred: impl FnMut(&LedgerSnapshot) -> bool) {
        self.inner.ledger.wait_for(pred).await
    }

    pub async fn submit(&self, task: TaskDescription, chains: usize) -> Result<SubmitOutcome, SubmitError> {
        self.inner.submit(task, chains).await
    }

    /// Sends a heartbeat now, outside the regular schedule.
    pub async fn heartbeat_now(&self) {
        self.inner.heartbeat_once().await
    }

    /// Stops every background task and releases the listeners.
    pub async fn shutdown(self) {
        self.inner.shutdown().await;
        tracing::info!(agent = %self.inner.agent_id().short(), "node stopped");
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.inner.stopping.store(true, Ordering::SeqCst);
        if let Ok(mut set) = self.inner.tasks.lock() {
            set.abort_all();
        }
    }
}
