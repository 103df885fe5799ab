//! The public runtime: rank contexts, task submission, event firing and
//! finalise with distributed termination detection.
//!
//! A [`Runtime`] is one rank's context. It owns a matcher, a scheduler and a
//! transport endpoint, and is cheap to clone. [`launch`] starts every rank of
//! a world that lives in this process and runs a main function on each.

mod context;
pub mod termination;

use std::cell::RefCell;
use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use context::{TaskContext, TaskFn};

use crate::matcher::{
    Activation, MatchError, Matcher, QuiescenceSnapshot, RetrieveMode, TaskDescriptor, WaitId, WaitOutcome,
};
use crate::scheduler::{PauseHandle, ProgressHook, ProgressMode, Scheduler, SchedulerError, TaskId};
use crate::transport::{
    Control, Frame, LoopbackHub, RankRoster, TcpTransport, Transport, TransportError, TransportKind,
};
use crate::types::{expand_dependencies, resolve_rank, CoreError, DependencyDescriptor, Event, Payload, RankSpec};
use termination::{LocalStatus, TerminationDetector, TokenAction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("no runtime is initialised in this context")]
    NotInitialized,
    #[error("a runtime is already initialised in this context")]
    AlreadyInitialized,
    #[error("only a running task may call this")]
    CalledOutsideTask,
    #[error("finalise cannot be called from inside a task")]
    FinaliseInsideTask,
    #[error("finalise was already called")]
    AlreadyFinalised,
    #[error("address payloads can only be fired to the local rank")]
    AddressToRemote,
    #[error("rank {rank} is not part of a world of {world_size} ranks")]
    UnknownRank { rank: usize, world_size: usize },
    #[error("lock {0:?} is not held by this task")]
    UnlockNotHeld(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("finalise timed out before global termination")]
    FinaliseTimeout(Box<Diagnostics>),
    #[error("rank {0} panicked")]
    RankPanicked(usize),
    #[error(transparent)]
    Core(CoreError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

impl From<CoreError> for RuntimeError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::ConcreteOutOfRange { rank, world_size } => RuntimeError::UnknownRank { rank, world_size },
            other => RuntimeError::Core(other),
        }
    }
}

impl From<SchedulerError> for RuntimeError {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::UnlockNotHeld(n) => RuntimeError::UnlockNotHeld(n),
            SchedulerError::CalledOutsideTask => RuntimeError::CalledOutsideTask,
        }
    }
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

/// Environment variables read by [`RuntimeConfig::apply_env`].
pub mod env {
    pub const WORKERS: &str = "EDAT_WORKERS";
    pub const PROGRESS: &str = "EDAT_PROGRESS";
    pub const ROSTER: &str = "EDAT_ROSTER";
    pub const RANK: &str = "EDAT_RANK";
    pub const DET_SEED: &str = "EDAT_DET_SEED";
}

/// How to build a world.
#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    /// Rank count for loopback worlds. TCP worlds take it from the roster.
    pub world_size: usize,
    pub workers_per_rank: usize,
    pub progress_mode: ProgressMode,
    pub transport: TransportKind,
    pub roster: Option<RankRoster>,
    /// TCP only: run just this rank in the current process.
    pub rank: Option<usize>,
    /// Loopback only: deliver frames in a seeded order.
    pub deterministic_seed: Option<u64>,
    pub connect_timeout: Duration,
    /// Give up on finalise after this long and report diagnostics.
    pub finalise_timeout: Option<Duration>,
}

fn default_workers() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            world_size: 1,
            workers_per_rank: default_workers(),
            progress_mode: ProgressMode::default(),
            transport: TransportKind::Loopback,
            roster: None,
            rank: None,
            deterministic_seed: None,
            connect_timeout: Duration::from_secs(30),
            finalise_timeout: None,
        }
    }
}

impl RuntimeConfig {
    pub fn loopback(world_size: usize) -> Self {
        RuntimeConfig {
            world_size,
            ..Default::default()
        }
    }

    pub fn tcp(roster: RankRoster) -> Self {
        RuntimeConfig {
            world_size: roster.world_size(),
            transport: TransportKind::Tcp,
            roster: Some(roster),
            ..Default::default()
        }
    }

    pub fn workers(mut self, n: usize) -> Self {
        self.workers_per_rank = n;
        self
    }

    pub fn progress(mut self, mode: ProgressMode) -> Self {
        self.progress_mode = mode;
        self
    }

    pub fn deterministic(mut self, seed: u64) -> Self {
        self.deterministic_seed = Some(seed);
        self
    }

    pub fn only_rank(mut self, rank: usize) -> Self {
        self.rank = Some(rank);
        self
    }

    pub fn finalise_timeout(mut self, timeout: Duration) -> Self {
        self.finalise_timeout = Some(timeout);
        self
    }

    /// Overrides fields from `EDAT_*` environment variables that are set.
    pub fn apply_env(mut self) -> Result<Self> {
        fn var<T: std::str::FromStr>(name: &str) -> Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            match std::env::var(name) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|e| RuntimeError::Config(format!("{name}={v}: {e}"))),
                Err(_) => Ok(None),
            }
        }
        if let Some(kind) = TransportKind::from_env() {
            self.transport = kind.map_err(RuntimeError::Config)?;
        }
        if let Some(w) = var(env::WORKERS)? {
            self.workers_per_rank = w;
        }
        if let Some(p) = var::<ProgressMode>(env::PROGRESS)? {
            self.progress_mode = p;
        }
        if let Some(path) = var::<PathBuf>(env::ROSTER)? {
            let roster = RankRoster::from_file(path)?;
            self.world_size = roster.world_size();
            self.roster = Some(roster);
        }
        if let Some(r) = var(env::RANK)? {
            self.rank = Some(r);
        }
        if let Some(s) = var(env::DET_SEED)? {
            self.deterministic_seed = Some(s);
        }
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.workers_per_rank == 0 {
            return Err(RuntimeError::Config("workers per rank must be at least 1".into()));
        }
        match self.transport {
            TransportKind::Loopback => {
                if self.world_size == 0 {
                    return Err(RuntimeError::Config("a world needs at least one rank".into()));
                }
                if self.rank.is_some() {
                    return Err(RuntimeError::Config("loopback runs every rank in one process".into()));
                }
            }
            TransportKind::Tcp => {
                let roster = self
                    .roster
                    .as_ref()
                    .ok_or_else(|| TransportError::RosterInvalid("tcp needs a roster".into()))?;
                if let Some(r) = self.rank {
                    roster.entry(r)?;
                }
                if self.deterministic_seed.is_some() {
                    return Err(RuntimeError::Config("deterministic delivery needs loopback".into()));
                }
            }
        }
        Ok(())
    }

    fn effective_world(&self) -> usize {
        match (&self.transport, &self.roster) {
            (TransportKind::Tcp, Some(r)) => r.world_size(),
            _ => self.world_size,
        }
    }
}

/// Counters and state reported by a rank when it finalises.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub rank: usize,
    pub world_size: usize,
    /// Events sent to other ranks.
    pub events_fired: u64,
    /// Events received from other ranks.
    pub events_received: u64,
    /// Events fired from this rank to itself.
    pub local_events: u64,
    pub tasks_completed: u64,
    pub task_panics: u64,
    pub pauses: u64,
    /// Frames whose sequence number was not the next one expected from
    /// their source.
    pub sequence_violations: u64,
    /// Termination rounds completed; rank 0 only.
    pub termination_rounds: u64,
    pub terminated: bool,
    pub main_finalised: bool,
    pub active_tasks: usize,
    pub matcher: QuiescenceSnapshot,
    pub buffered_persistent_events: usize,
    pub persistent_tasks: usize,
    pub transport_error: Option<String>,
}

impl Diagnostics {
    /// Local reasons this rank cannot yet be part of global termination.
    pub fn blocking_conditions(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.main_finalised {
            out.push("main context has not reached finalise");
        }
        if self.matcher.outstanding_transient > 0 {
            out.push("transient tasks waiting for dependencies");
        }
        if self.active_tasks > 0 || self.matcher.paused_waits > 0 {
            out.push("tasks queued, running or paused");
        }
        if self.matcher.unconsumed_nonpersistent_events > 0 {
            out.push("unconsumed non-persistent events");
        }
        out
    }
}

struct WaitSlot {
    handle: PauseHandle,
    events: Arc<Mutex<Option<Vec<Event>>>>,
}

#[derive(Default)]
struct Control_ {
    terminated: bool,
    error: Option<TransportError>,
}

const ROUND_BACKOFF: Duration = Duration::from_micros(500);
const POLL_SLICE: Duration = Duration::from_millis(2);
const IDLE_POLL_SLICE: Duration = Duration::from_millis(1);

struct Shared {
    rank: usize,
    world_size: usize,
    transport: Arc<dyn Transport>,
    matcher: Mutex<Matcher<TaskFn>>,
    scheduler: Scheduler,
    progress_mode: ProgressMode,
    /// Next sequence number per target. Held across assignment and send so
    /// sequence order is send order.
    send_seq: Mutex<Vec<u64>>,
    recv_seq: Mutex<Vec<u64>>,
    waits: Mutex<HashMap<WaitId, WaitSlot>>,
    next_wait: AtomicU64,
    fired: AtomicU64,
    received: AtomicU64,
    local_events: AtomicU64,
    sequence_violations: AtomicU64,
    detector: Mutex<(TerminationDetector, Instant)>,
    progress_lock: Mutex<()>,
    finalising: AtomicBool,
    finalised: AtomicBool,
    stop_progress: AtomicBool,
    control: Mutex<Control_>,
    control_cv: Condvar,
    progress_thread: Mutex<Option<JoinHandle<()>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

thread_local! {
    static CURRENT: RefCell<Option<Runtime>> = const { RefCell::new(None) };
    static CURRENT_TASK: RefCell<Option<(usize, TaskId)>> = const { RefCell::new(None) };
}

/// One rank's runtime context.
#[derive(Clone)]
pub struct Runtime {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("rank", &self.shared.rank)
            .field("world_size", &self.shared.world_size)
            .finish()
    }
}

/// The runtime installed in the calling thread.
pub fn current() -> Result<Runtime> {
    CURRENT.with(|c| c.borrow().clone()).ok_or(RuntimeError::NotInitialized)
}

pub fn get_rank() -> Result<usize> {
    current().map(|rt| rt.rank())
}

pub fn get_world_size() -> Result<usize> {
    current().map(|rt| rt.world_size())
}

impl Runtime {
    /// Initialises a single rank in the calling thread: a one-rank loopback
    /// world, or one rank of a TCP roster.
    pub fn init(config: &RuntimeConfig) -> Result<Runtime> {
        config.validate()?;
        if CURRENT.with(|c| c.borrow().is_some()) {
            return Err(RuntimeError::AlreadyInitialized);
        }
        let transport: Arc<dyn Transport> = match config.transport {
            TransportKind::Loopback => {
                if config.world_size != 1 {
                    return Err(RuntimeError::Config(
                        "init creates one rank; use launch for multi-rank loopback worlds".into(),
                    ));
                }
                let hub = match config.deterministic_seed {
                    Some(s) => LoopbackHub::deterministic(1, s),
                    None => LoopbackHub::new(1),
                };
                Arc::new(hub.endpoint(0)?)
            }
            TransportKind::Tcp => {
                let roster = config.roster.as_ref().expect("validated");
                let rank = config
                    .rank
                    .ok_or_else(|| RuntimeError::Config("tcp init needs the local rank".into()))?;
                Arc::new(TcpTransport::connect(roster, rank, config.connect_timeout)?)
            }
        };
        Self::with_transport(config, transport)
    }

    /// Initialises a rank on an existing transport endpoint and installs it
    /// in the calling thread.
    pub fn with_transport(config: &RuntimeConfig, transport: Arc<dyn Transport>) -> Result<Runtime> {
        if config.workers_per_rank == 0 {
            return Err(RuntimeError::Config("workers per rank must be at least 1".into()));
        }
        if CURRENT.with(|c| c.borrow().is_some()) {
            return Err(RuntimeError::AlreadyInitialized);
        }
        let rank = transport.rank();
        let world_size = transport.world_size();
        let mode = config.progress_mode;
        let workers = config.workers_per_rank;
        let shared = Arc::new_cyclic(|weak: &Weak<Shared>| {
            let hook: Option<ProgressHook> = match mode {
                ProgressMode::IdleWorker => {
                    let weak = weak.clone();
                    Some(Arc::new(move || {
                        if let Some(sh) = weak.upgrade() {
                            sh.progress(IDLE_POLL_SLICE);
                        }
                    }))
                }
                ProgressMode::DedicatedThread => None,
            };
            Shared {
                rank,
                world_size,
                transport,
                matcher: Mutex::new(Matcher::new()),
                scheduler: Scheduler::new(rank, workers, hook),
                progress_mode: mode,
                send_seq: Mutex::new(vec![0; world_size]),
                recv_seq: Mutex::new(vec![0; world_size]),
                waits: Mutex::new(HashMap::new()),
                next_wait: AtomicU64::new(0),
                fired: AtomicU64::new(0),
                received: AtomicU64::new(0),
                local_events: AtomicU64::new(0),
                sequence_violations: AtomicU64::new(0),
                detector: Mutex::new((TerminationDetector::new(rank, world_size), Instant::now())),
                progress_lock: Mutex::new(()),
                finalising: AtomicBool::new(false),
                finalised: AtomicBool::new(false),
                stop_progress: AtomicBool::new(false),
                control: Mutex::new(Control_::default()),
                control_cv: Condvar::new(),
                progress_thread: Mutex::new(None),
            }
        });
        if mode == ProgressMode::DedicatedThread {
            let sh = shared.clone();
            let handle = thread::Builder::new()
                .name(format!("edat-progress-{rank}"))
                .spawn(move || {
                    while !sh.stop_progress.load(Ordering::SeqCst) {
                        sh.progress(POLL_SLICE);
                    }
                })
                .map_err(|e| RuntimeError::Config(format!("cannot start progress thread: {e}")))?;
            *lock(&shared.progress_thread) = Some(handle);
        }
        let rt = Runtime { shared };
        CURRENT.with(|c| *c.borrow_mut() = Some(rt.clone()));
        Ok(rt)
    }

    pub fn rank(&self) -> usize {
        self.shared.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.world_size
    }

    pub fn worker_count(&self) -> usize {
        self.shared.scheduler.worker_count()
    }

    /// Submits a transient task that runs once all `deps` are satisfied.
    pub fn submit<F>(&self, deps: &[DependencyDescriptor], body: F) -> Result<()>
    where
        F: Fn(&TaskContext, &[Event]) + Send + Sync + 'static,
    {
        self.submit_descriptor(deps, Arc::new(body), false, None)
    }

    /// Submits a task that re-arms every time its dependencies are satisfied.
    pub fn submit_persistent<F>(&self, deps: &[DependencyDescriptor], body: F) -> Result<()>
    where
        F: Fn(&TaskContext, &[Event]) + Send + Sync + 'static,
    {
        self.submit_descriptor(deps, Arc::new(body), true, None)
    }

    /// A persistent task that can later be removed by name.
    pub fn submit_named_persistent<F>(&self, name: &str, deps: &[DependencyDescriptor], body: F) -> Result<()>
    where
        F: Fn(&TaskContext, &[Event]) + Send + Sync + 'static,
    {
        self.submit_descriptor(deps, Arc::new(body), true, Some(name.to_string()))
    }

    pub fn submit_task_fn(
        &self,
        deps: &[DependencyDescriptor],
        body: TaskFn,
        persistent: bool,
        name: Option<String>,
    ) -> Result<()> {
        self.submit_descriptor(deps, body, persistent, name)
    }

    fn submit_descriptor(
        &self,
        deps: &[DependencyDescriptor],
        body: TaskFn,
        persistent: bool,
        name: Option<String>,
    ) -> Result<()> {
        let resolved = expand_dependencies(deps, self.shared.rank, self.shared.world_size)?;
        let mut d = TaskDescriptor::new(body, resolved);
        d.persistent = persistent;
        d.name = name;
        let mut m = lock(&self.shared.matcher);
        let acts = m.register_task(d)?;
        self.shared.dispatch(acts);
        Ok(())
    }

    /// Fires an event. The payload is already a private copy; the caller's
    /// buffers can change freely afterwards.
    pub fn fire(&self, payload: Payload, target: impl Into<RankSpec>, identifier: &str) -> Result<()> {
        self.shared.fire(payload, target.into(), identifier, false)
    }

    /// Fires an event that stays available at its target after every
    /// consumption.
    pub fn fire_persistent(&self, payload: Payload, target: impl Into<RankSpec>, identifier: &str) -> Result<()> {
        self.shared.fire(payload, target.into(), identifier, true)
    }

    /// Stops a named persistent task from firing again.
    pub fn remove_persistent_task(&self, name: &str) -> bool {
        lock(&self.shared.matcher).remove_persistent_task(name)
    }

    fn current_task(&self) -> Result<TaskId> {
        let me = Arc::as_ptr(&self.shared) as usize;
        CURRENT_TASK
            .with(|c| *c.borrow())
            .filter(|(rt, _)| *rt == me)
            .map(|(_, t)| t)
            .ok_or(RuntimeError::CalledOutsideTask)
    }

    /// Task only: blocks until every dependency is satisfied, pausing the
    /// task (and releasing its locks) if they are not already.
    pub fn wait(&self, deps: &[DependencyDescriptor]) -> Result<Vec<Event>> {
        let task = self.current_task()?;
        self.wait_as(task, deps)
    }

    /// Task only: takes whatever subset of `deps` is buffered now.
    pub fn retrieve_any(&self, deps: &[DependencyDescriptor]) -> Result<(Vec<Option<Event>>, usize)> {
        self.current_task()?;
        let resolved = expand_dependencies(deps, self.shared.rank, self.shared.world_size)?;
        let r = lock(&self.shared.matcher).retrieve_matching(&resolved, RetrieveMode::Available);
        Ok((r.slots, r.filled))
    }

    pub fn lock(&self, name: &str) -> Result<()> {
        let task = self.current_task()?;
        Ok(self.shared.scheduler.lock(task, name)?)
    }

    pub fn unlock(&self, name: &str) -> Result<()> {
        let task = self.current_task()?;
        Ok(self.shared.scheduler.unlock(task, name)?)
    }

    pub fn test_lock(&self, name: &str) -> Result<bool> {
        let task = self.current_task()?;
        Ok(self.shared.scheduler.test_lock(task, name))
    }

    fn wait_as(&self, task: TaskId, deps: &[DependencyDescriptor]) -> Result<Vec<Event>> {
        let resolved = expand_dependencies(deps, self.shared.rank, self.shared.world_size)?;
        if !self.shared.scheduler.on_worker() {
            return Err(RuntimeError::CalledOutsideTask);
        }
        let id = WaitId(self.shared.next_wait.fetch_add(1, Ordering::SeqCst));
        let handle = self.shared.scheduler.prepare_pause();
        let events = Arc::new(Mutex::new(None));
        {
            let mut m = lock(&self.shared.matcher);
            match m.register_wait(resolved, id) {
                WaitOutcome::Satisfied(ev) => return Ok(ev),
                WaitOutcome::Pending => {
                    lock(&self.shared.waits).insert(
                        id,
                        WaitSlot {
                            handle: handle.clone(),
                            events: events.clone(),
                        },
                    );
                }
            }
        }
        self.shared.scheduler.pause_releasing_locks(task, &handle)?;
        let got = lock(&events).take().expect("resumed wait carries its events");
        Ok(got)
    }

    /// Snapshot of this rank's counters and state.
    pub fn diagnostics(&self) -> Diagnostics {
        self.shared.diagnostics()
    }

    /// Blocks until global termination, then shuts the rank down.
    pub fn finalise(&self) -> Result<Diagnostics> {
        self.finalise_within(None)
    }

    /// Like [`Runtime::finalise`] but gives up after `timeout`. The rank is
    /// torn down either way; on timeout the error carries diagnostics.
    pub fn finalise_timeout(&self, timeout: Duration) -> Result<Diagnostics> {
        self.finalise_within(Some(timeout))
    }

    fn finalise_within(&self, timeout: Option<Duration>) -> Result<Diagnostics> {
        if self.current_task().is_ok() || self.shared.scheduler.on_worker() {
            return Err(RuntimeError::FinaliseInsideTask);
        }
        if self.shared.finalised.swap(true, Ordering::SeqCst) {
            return Err(RuntimeError::AlreadyFinalised);
        }
        let sh = &self.shared;
        sh.finalising.store(true, Ordering::SeqCst);
        let deadline = timeout.map(|t| Instant::now() + t);
        let outcome = loop {
            {
                let c = lock(&sh.control);
                if let Some(e) = &c.error {
                    break Err(RuntimeError::Transport(e.clone()));
                }
                if c.terminated {
                    break Ok(());
                }
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                break Err(RuntimeError::FinaliseTimeout(Box::new(sh.diagnostics())));
            }
            if sh.progress_mode == ProgressMode::IdleWorker {
                sh.progress(IDLE_POLL_SLICE);
            } else {
                let c = lock(&sh.control);
                if !c.terminated && c.error.is_none() {
                    let _ = sh.control_cv.wait_timeout(c, Duration::from_millis(5));
                }
            }
        };
        let diag = sh.diagnostics();
        sh.teardown();
        CURRENT.with(|c| {
            let mut c = c.borrow_mut();
            if c.as_ref().is_some_and(|rt| Arc::ptr_eq(&rt.shared, &self.shared)) {
                *c = None;
            }
        });
        outcome.map(|_| diag)
    }
}

impl Shared {
    fn dispatch(self: &Arc<Self>, acts: Vec<Activation<TaskFn>>) {
        for act in acts {
            match act {
                Activation::Task(ready) => {
                    let sh = self.clone();
                    let body = ready.descriptor.task.clone();
                    let name = ready.descriptor.name.clone();
                    let instance = ready.instance;
                    let events = ready.events;
                    self.scheduler.spawn(move |task| {
                        let rt = Runtime { shared: sh };
                        let me = Arc::as_ptr(&rt.shared) as usize;
                        let prev = CURRENT.with(|c| c.borrow_mut().replace(rt.clone()));
                        CURRENT_TASK.with(|c| *c.borrow_mut() = Some((me, task)));
                        let ctx = TaskContext::new(rt, task, name, instance);
                        let result = catch_unwind(AssertUnwindSafe(|| body(&ctx, &events)));
                        CURRENT_TASK.with(|c| *c.borrow_mut() = None);
                        CURRENT.with(|c| *c.borrow_mut() = prev);
                        if let Err(p) = result {
                            std::panic::resume_unwind(p);
                        }
                    });
                }
                Activation::Resume { wait, events } => {
                    let slot = lock(&self.waits).remove(&wait).expect("resumed wait is registered");
                    *lock(&slot.events) = Some(events);
                    self.scheduler.resume(slot.handle);
                }
            }
        }
    }

    fn fire(self: &Arc<Self>, payload: Payload, target: RankSpec, identifier: &str, persistent: bool) -> Result<()> {
        let targets = resolve_rank(target, self.rank, self.world_size)?;
        if payload.is_address() && targets.iter().any(|&t| t != self.rank) {
            return Err(RuntimeError::AddressToRemote);
        }
        let template = Event::new(self.rank, identifier, payload, persistent, 0)?;
        let mut seqs = lock(&self.send_seq);
        for t in targets {
            let mut ev = template.clone();
            ev.sequence = seqs[t];
            seqs[t] += 1;
            if t == self.rank {
                self.local_events.fetch_add(1, Ordering::SeqCst);
                let mut m = lock(&self.matcher);
                let acts = m.deliver_event(ev);
                self.dispatch(acts);
            } else {
                self.fired.fetch_add(1, Ordering::SeqCst);
                if let Err(e) = self.transport.send(t, Frame::Event(ev)) {
                    self.fired.fetch_sub(1, Ordering::SeqCst);
                    return Err(e.into());
                }
            }
        }
        Ok(())
    }

    fn local_status(&self) -> LocalStatus {
        let m = lock(&self.matcher);
        let quiescent = self.finalising.load(Ordering::SeqCst)
            && m.quiescence_snapshot().is_quiescent()
            && self.scheduler.active_tasks() == 0;
        LocalStatus {
            quiescent,
            fired: self.fired.load(Ordering::SeqCst),
            received: self.received.load(Ordering::SeqCst),
        }
    }

    fn set_terminated(&self) {
        lock(&self.control).terminated = true;
        self.control_cv.notify_all();
    }

    fn set_error(&self, e: TransportError) {
        let mut c = lock(&self.control);
        if !c.terminated && c.error.is_none() {
            c.error = Some(e);
        }
        drop(c);
        self.control_cv.notify_all();
    }

    fn is_done(&self) -> bool {
        let c = lock(&self.control);
        c.terminated || c.error.is_some()
    }

    fn act(&self, action: TokenAction, detector: &mut (TerminationDetector, Instant)) {
        match action {
            TokenAction::Forward { to, token } => {
                let frame = Frame::Control {
                    source: self.rank,
                    message: Control::Token(token),
                };
                if let Err(e) = self.transport.send(to, frame) {
                    self.set_error(e);
                }
            }
            TokenAction::Retry => {
                detector.1 = Instant::now() + ROUND_BACKOFF;
            }
            TokenAction::Terminated => {
                for r in 1..self.world_size {
                    let frame = Frame::Control {
                        source: self.rank,
                        message: Control::Terminate {
                            round: detector.0.completed_rounds(),
                        },
                    };
                    let _ = self.transport.send(r, frame);
                }
                self.set_terminated();
            }
        }
    }

    /// One progress slice: poll, deliver, handle termination traffic.
    fn progress(self: &Arc<Self>, slice: Duration) {
        let Ok(_guard) = self.progress_lock.try_lock() else {
            thread::sleep(Duration::from_micros(200));
            return;
        };
        if self.is_done() {
            thread::sleep(slice);
            return;
        }
        let mut slice = slice;
        if self.rank == 0 && self.finalising.load(Ordering::SeqCst) {
            let mut det = lock(&self.detector);
            if !det.0.round_in_flight() {
                let now = Instant::now();
                if now >= det.1 {
                    let status = self.local_status();
                    let action = det.0.start_round(status);
                    self.act(action, &mut det);
                    slice = slice.min(ROUND_BACKOFF);
                } else {
                    slice = slice.min(det.1 - now);
                }
            }
        }
        let frames = match self.transport.poll(slice) {
            Ok(f) => f,
            Err(e) => {
                self.set_error(e);
                return;
            }
        };
        for frame in frames {
            match frame {
                Frame::Event(ev) => {
                    {
                        let mut exp = lock(&self.recv_seq);
                        let src = ev.source_rank;
                        if src < exp.len() {
                            if ev.sequence != exp[src] {
                                self.sequence_violations.fetch_add(1, Ordering::SeqCst);
                            }
                            exp[src] = ev.sequence + 1;
                        }
                    }
                    let mut m = lock(&self.matcher);
                    self.received.fetch_add(1, Ordering::SeqCst);
                    let acts = m.deliver_event(ev);
                    self.dispatch(acts);
                }
                Frame::Control { message, .. } => match message {
                    Control::Token(token) => {
                        let mut det = lock(&self.detector);
                        let status = self.local_status();
                        let action = det.0.on_token(token, status);
                        self.act(action, &mut det);
                    }
                    Control::Terminate { .. } => self.set_terminated(),
                    Control::Goodbye => {}
                },
            }
        }
    }

    fn diagnostics(&self) -> Diagnostics {
        let (snap, persistent_tasks, buffered) = {
            let m = lock(&self.matcher);
            let snap = m.quiescence_snapshot();
            let store = m.store();
            (snap, m.persistent_task_count(), store.len() - store.nonpersistent_len())
        };
        let stats = self.scheduler.stats();
        let c = lock(&self.control);
        Diagnostics {
            rank: self.rank,
            world_size: self.world_size,
            events_fired: self.fired.load(Ordering::SeqCst),
            events_received: self.received.load(Ordering::SeqCst),
            local_events: self.local_events.load(Ordering::SeqCst),
            tasks_completed: stats.completed,
            task_panics: stats.panicked,
            pauses: stats.pauses,
            sequence_violations: self.sequence_violations.load(Ordering::SeqCst),
            termination_rounds: lock(&self.detector).0.completed_rounds(),
            terminated: c.terminated,
            main_finalised: self.finalising.load(Ordering::SeqCst),
            active_tasks: self.scheduler.active_tasks(),
            matcher: snap,
            buffered_persistent_events: buffered,
            persistent_tasks,
            transport_error: c.error.as_ref().map(|e| e.to_string()),
        }
    }

    fn teardown(&self) {
        self.stop_progress.store(true, Ordering::SeqCst);
        if let Some(h) = lock(&self.progress_thread).take() {
            let _ = h.join();
        }
        self.scheduler.shutdown();
        self.transport.shutdown();
        // Drops task closures, which may hold runtime handles.
        *lock(&self.matcher) = Matcher::new();
        lock(&self.waits).clear();
    }
}

/// Runs `main` on every rank of the world described by `config` that lives
/// in this process, then finalises each rank. Returns per-rank diagnostics
/// in rank order.
pub fn launch<F>(config: RuntimeConfig, main: F) -> Result<Vec<Diagnostics>>
where
    F: Fn(&Runtime) + Send + Sync,
{
    config.validate()?;
    let world = config.effective_world();
    let run_rank = |transport: Arc<dyn Transport>| -> Result<Diagnostics> {
        let rank = transport.rank();
        let rt = Runtime::with_transport(&config, transport)?;
        if catch_unwind(AssertUnwindSafe(|| main(&rt))).is_err() {
            rt.shared.transport.abort();
            let _ = rt.finalise_timeout(Duration::ZERO);
            return Err(RuntimeError::RankPanicked(rank));
        }
        match config.finalise_timeout {
            Some(t) => rt.finalise_timeout(t),
            None => rt.finalise(),
        }
    };
    match config.transport {
        TransportKind::Loopback => {
            let hub = match config.deterministic_seed {
                Some(s) => LoopbackHub::deterministic(world, s),
                None => LoopbackHub::new(world),
            };
            let endpoints = (0..world)
                .map(|r| hub.endpoint(r).map(|e| Arc::new(e) as Arc<dyn Transport>))
                .collect::<Result<Vec<_>, _>>()?;
            run_all(endpoints.into_iter().map(|t| move || Ok(t)).collect(), &run_rank)
        }
        TransportKind::Tcp => {
            let roster = config.roster.clone().expect("validated");
            let timeout = config.connect_timeout;
            let ranks: Vec<usize> = match config.rank {
                Some(r) => vec![r],
                None => (0..world).collect(),
            };
            let makers = ranks
                .into_iter()
                .map(|r| {
                    let roster = roster.clone();
                    move || -> Result<Arc<dyn Transport>> {
                        Ok(Arc::new(TcpTransport::connect(&roster, r, timeout)?) as Arc<dyn Transport>)
                    }
                })
                .collect();
            run_all(makers, &run_rank)
        }
    }
}

fn run_all<M, R>(makers: Vec<M>, run_rank: &R) -> Result<Vec<Diagnostics>>
where
    M: FnOnce() -> Result<Arc<dyn Transport>> + Send,
    R: Fn(Arc<dyn Transport>) -> Result<Diagnostics> + Sync,
{
    if makers.len() == 1 {
        let maker = makers.into_iter().next().expect("one rank");
        return Ok(vec![run_rank(maker()?)?]);
    }
    let results: Vec<Result<Diagnostics>> = thread::scope(|s| {
        let handles: Vec<_> = makers
            .into_iter()
            .enumerate()
            .map(|(i, maker)| {
                let h = thread::Builder::new()
                    .name(format!("edat-rank-{i}"))
                    .spawn_scoped(s, move || run_rank(maker()?))
                    .expect("spawn rank thread");
                (i, h)
            })
            .collect();
        handles
            .into_iter()
            .map(|(i, h)| h.join().unwrap_or(Err(RuntimeError::RankPanicked(i))))
            .collect()
    });
    results.into_iter().collect()
}
