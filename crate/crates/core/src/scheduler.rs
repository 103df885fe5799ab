//! FIFO worker pool with pausable tasks and a named lock table.
//!
//! Each task body runs on a worker thread. A task that pauses keeps its
//! thread (and so its stack and locals) but gives up its worker slot: a
//! replacement worker is started before the paused thread blocks. When the
//! task is resumed a `Resume` job is queued like any other job. The worker
//! that dequeues it hands its slot back to the paused thread and exits, so
//! the number of threads executing jobs never exceeds the configured worker
//! count, and the continuation may pick up on whatever slot frees first.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("lock {0:?} is not held by this task")]
    UnlockNotHeld(String),
    #[error("only a running task may call this")]
    CalledOutsideTask,
}

/// Where transport polling runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProgressMode {
    /// A thread of its own, never running task bodies.
    #[default]
    DedicatedThread,
    /// An idle worker polls in short slices between queue checks.
    IdleWorker,
}

impl FromStr for ProgressMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "dedicated" | "dedicated-thread" | "thread" => Ok(ProgressMode::DedicatedThread),
            "idle" | "idle-worker" | "worker" => Ok(ProgressMode::IdleWorker),
            other => Err(format!("unknown progress mode {other:?}, expected dedicated or idle")),
        }
    }
}

/// Identifies one task for the lock table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(pub u64);

type Body = Box<dyn FnOnce(TaskId) + Send>;

/// Called by an idle worker in `IdleWorker` mode. Should return within a
/// short slice.
pub type ProgressHook = Arc<dyn Fn() + Send + Sync>;

#[derive(Debug, Default)]
struct Parker {
    resumed: Mutex<bool>,
    wake: Condvar,
}

impl Parker {
    fn park(&self) {
        let mut r = self.resumed.lock().unwrap_or_else(|p| p.into_inner());
        while !*r {
            r = self.wake.wait(r).unwrap_or_else(|p| p.into_inner());
        }
        *r = false;
    }

    fn unpark(&self) {
        *self.resumed.lock().unwrap_or_else(|p| p.into_inner()) = true;
        self.wake.notify_one();
    }
}

/// Wakes one paused task. Obtained from [`Scheduler::prepare_pause`] and
/// handed to whoever will satisfy the wait.
#[derive(Debug, Clone)]
pub struct PauseHandle(Arc<Parker>);

enum Job {
    Run(TaskId, Body),
    Resume(PauseHandle),
}

#[derive(Default)]
struct Queue {
    jobs: VecDeque<Job>,
    shutting_down: bool,
    progress_running: bool,
}

#[derive(Debug, Default)]
struct LockEntry {
    holder: Option<TaskId>,
    waiters: VecDeque<(TaskId, PauseHandle)>,
}

#[derive(Debug, Default)]
struct LockTable {
    locks: BTreeMap<String, LockEntry>,
    held: BTreeMap<TaskId, BTreeSet<String>>,
}

impl LockTable {
    fn grant(&mut self, name: &str, task: TaskId) {
        self.locks.entry(name.to_string()).or_default().holder = Some(task);
        self.held.entry(task).or_default().insert(name.to_string());
    }

    /// Frees `name` and returns the waiter that now holds it, if any.
    fn release(&mut self, name: &str, task: TaskId) -> Result<Option<PauseHandle>, SchedulerError> {
        let owned = self.held.get_mut(&task).map(|s| s.remove(name)).unwrap_or(false);
        if !owned {
            return Err(SchedulerError::UnlockNotHeld(name.to_string()));
        }
        if self.held.get(&task).is_some_and(BTreeSet::is_empty) {
            self.held.remove(&task);
        }
        let entry = self.locks.get_mut(name).expect("held lock has an entry");
        match entry.waiters.pop_front() {
            Some((next, handle)) => {
                entry.holder = Some(next);
                self.held.entry(next).or_default().insert(name.to_string());
                Ok(Some(handle))
            }
            None => {
                self.locks.remove(name);
                Ok(None)
            }
        }
    }
}

struct Inner {
    rank: usize,
    workers: usize,
    queue: Mutex<Queue>,
    work: Condvar,
    idle: Condvar,
    locks: Mutex<LockTable>,
    active: AtomicUsize,
    queued: AtomicUsize,
    next_task: AtomicU64,
    panicked: AtomicU64,
    completed: AtomicU64,
    pauses: AtomicU64,
    threads: Mutex<Vec<JoinHandle<()>>>,
    progress: Option<ProgressHook>,
}

thread_local! {
    static WORKER_OF: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

impl Inner {
    fn id(self: &Arc<Self>) -> usize {
        Arc::as_ptr(self) as usize
    }

    fn lock_queue(&self) -> MutexGuard<'_, Queue> {
        self.queue.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn lock_table(&self) -> MutexGuard<'_, LockTable> {
        self.locks.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn push(&self, job: Job) {
        self.queued.fetch_add(1, Ordering::SeqCst);
        self.lock_queue().jobs.push_back(job);
        self.work.notify_one();
    }

    fn spawn_worker(self: &Arc<Self>) {
        let inner = self.clone();
        let handle = thread::Builder::new()
            .name(format!("edat-worker-{}", self.rank))
            .spawn(move || {
                WORKER_OF.with(|w| w.set(inner.id()));
                inner.worker_loop();
            })
            .expect("spawn worker thread");
        self.threads.lock().unwrap_or_else(|p| p.into_inner()).push(handle);
    }

    fn next_job(&self) -> Option<Job> {
        let mut q = self.lock_queue();
        loop {
            if let Some(job) = q.jobs.pop_front() {
                self.queued.fetch_sub(1, Ordering::SeqCst);
                return Some(job);
            }
            if q.shutting_down {
                return None;
            }
            match &self.progress {
                Some(hook) if !q.progress_running => {
                    q.progress_running = true;
                    drop(q);
                    hook();
                    q = self.lock_queue();
                    q.progress_running = false;
                }
                _ => {
                    q = self
                        .work
                        .wait_timeout(q, Duration::from_millis(50))
                        .unwrap_or_else(|p| p.into_inner())
                        .0;
                }
            }
        }
    }

    fn worker_loop(self: &Arc<Self>) {
        while let Some(job) = self.next_job() {
            match job {
                Job::Run(id, body) => {
                    if catch_unwind(AssertUnwindSafe(|| body(id))).is_err() {
                        self.panicked.fetch_add(1, Ordering::SeqCst);
                    }
                    self.release_all(id);
                    self.completed.fetch_add(1, Ordering::SeqCst);
                    if self.active.fetch_sub(1, Ordering::SeqCst) == 1 {
                        let _q = self.lock_queue();
                        self.idle.notify_all();
                    }
                }
                Job::Resume(handle) => {
                    handle.0.unpark();
                    return;
                }
            }
        }
        // Hand any progress duty to a sibling still waiting.
        self.work.notify_all();
    }

    fn release_all(&self, task: TaskId) -> Vec<String> {
        let mut table = self.lock_table();
        let names: Vec<String> = table
            .held
            .get(&task)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        let mut wake = Vec::new();
        for name in &names {
            if let Ok(Some(h)) = table.release(name, task) {
                wake.push(h);
            }
        }
        drop(table);
        for h in wake {
            self.push(Job::Resume(h));
        }
        names
    }
}

/// Scheduler statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchedulerStats {
    pub completed: u64,
    pub panicked: u64,
    pub pauses: u64,
}

/// Worker pool for one rank.
#[derive(Clone)]
pub struct Scheduler {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler")
            .field("rank", &self.inner.rank)
            .field("workers", &self.inner.workers)
            .field("active", &self.active_tasks())
            .finish()
    }
}

impl Scheduler {
    /// Starts `workers` worker threads. With a `progress` hook, idle workers
    /// take turns calling it.
    pub fn new(rank: usize, workers: usize, progress: Option<ProgressHook>) -> Self {
        let workers = workers.max(1);
        let inner = Arc::new(Inner {
            rank,
            workers,
            queue: Mutex::new(Queue::default()),
            work: Condvar::new(),
            idle: Condvar::new(),
            locks: Mutex::new(LockTable::default()),
            active: AtomicUsize::new(0),
            queued: AtomicUsize::new(0),
            next_task: AtomicU64::new(0),
            panicked: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            pauses: AtomicU64::new(0),
            threads: Mutex::new(Vec::new()),
            progress,
        });
        for _ in 0..workers {
            inner.spawn_worker();
        }
        Scheduler { inner }
    }

    pub fn worker_count(&self) -> usize {
        self.inner.workers
    }

    /// Queues a task body behind everything already queued.
    pub fn spawn(&self, body: impl FnOnce(TaskId) + Send + 'static) -> TaskId {
        let id = TaskId(self.inner.next_task.fetch_add(1, Ordering::SeqCst));
        self.inner.active.fetch_add(1, Ordering::SeqCst);
        self.inner.push(Job::Run(id, Box::new(body)));
        id
    }

    /// Tasks queued, running or paused.
    pub fn active_tasks(&self) -> usize {
        self.inner.active.load(Ordering::SeqCst)
    }

    /// Jobs (new tasks and resumptions) waiting for a worker.
    pub fn queued_jobs(&self) -> usize {
        self.inner.queued.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> SchedulerStats {
        SchedulerStats {
            completed: self.inner.completed.load(Ordering::SeqCst),
            panicked: self.inner.panicked.load(Ordering::SeqCst),
            pauses: self.inner.pauses.load(Ordering::SeqCst),
        }
    }

    /// Whether the calling thread is one of this pool's workers.
    pub fn on_worker(&self) -> bool {
        WORKER_OF.with(|w| w.get()) == self.inner.id()
    }

    /// Blocks until no task is queued, running or paused, or `timeout` passes.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let mut q = self.inner.lock_queue();
        let deadline = std::time::Instant::now() + timeout;
        while self.active_tasks() > 0 {
            let now = std::time::Instant::now();
            if now >= deadline {
                return false;
            }
            q = self
                .inner
                .idle
                .wait_timeout(q, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        true
    }

    pub fn prepare_pause(&self) -> PauseHandle {
        PauseHandle(Arc::new(Parker::default()))
    }

    /// Parks the calling task until `handle` is resumed. The worker slot is
    /// handed to a fresh worker for the duration.
    pub fn pause(&self, handle: &PauseHandle) -> Result<(), SchedulerError> {
        if !self.on_worker() {
            return Err(SchedulerError::CalledOutsideTask);
        }
        self.inner.pauses.fetch_add(1, Ordering::SeqCst);
        self.inner.spawn_worker();
        handle.0.park();
        Ok(())
    }

    /// Queues the continuation of a paused task behind current jobs.
    pub fn resume(&self, handle: PauseHandle) {
        self.inner.push(Job::Resume(handle));
    }

    /// Releases every lock of `task`, pauses, then reacquires the same locks
    /// in name order before returning.
    pub fn pause_releasing_locks(&self, task: TaskId, handle: &PauseHandle) -> Result<(), SchedulerError> {
        if !self.on_worker() {
            return Err(SchedulerError::CalledOutsideTask);
        }
        let held = self.inner.release_all(task);
        self.pause(handle)?;
        for name in &held {
            self.lock(task, name)?;
        }
        Ok(())
    }

    /// Acquires `name` for `task`, pausing while another task holds it.
    /// Locks already held by `task` stay held while it waits.
    pub fn lock(&self, task: TaskId, name: &str) -> Result<(), SchedulerError> {
        if !self.on_worker() {
            return Err(SchedulerError::CalledOutsideTask);
        }
        let handle = {
            let mut table = self.inner.lock_table();
            let entry = table.locks.entry(name.to_string()).or_default();
            match entry.holder {
                None => {
                    table.grant(name, task);
                    return Ok(());
                }
                Some(h) if h == task => return Ok(()),
                Some(_) => {
                    let handle = self.prepare_pause();
                    entry.waiters.push_back((task, handle.clone()));
                    handle
                }
            }
        };
        // `release` grants the lock to us before queueing our resumption.
        self.pause(&handle)
    }

    /// Acquires `name` if it is free. Never pauses.
    pub fn test_lock(&self, task: TaskId, name: &str) -> bool {
        let mut table = self.inner.lock_table();
        match table.locks.get(name).and_then(|e| e.holder) {
            None => {
                table.grant(name, task);
                true
            }
            Some(h) => h == task,
        }
    }

    pub fn unlock(&self, task: TaskId, name: &str) -> Result<(), SchedulerError> {
        let next = self.inner.lock_table().release(name, task)?;
        if let Some(h) = next {
            self.resume(h);
        }
        Ok(())
    }

    /// Names of the locks `task` holds, in order.
    pub fn held_locks(&self, task: TaskId) -> Vec<String> {
        self.inner
            .lock_table()
            .held
            .get(&task)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Current holder of `name`.
    pub fn lock_holder(&self, name: &str) -> Option<TaskId> {
        self.inner.lock_table().locks.get(name).and_then(|e| e.holder)
    }

    /// Stops the workers once the queue drains and joins their threads.
    /// Paused tasks are left parked.
    pub fn shutdown(&self) {
        self.inner.lock_queue().shutting_down = true;
        self.inner.work.notify_all();
        if self.on_worker() {
            return;
        }
        loop {
            let batch: Vec<_> = std::mem::take(&mut *self.inner.threads.lock().unwrap_or_else(|p| p.into_inner()));
            if batch.is_empty() {
                break;
            }
            for t in batch {
                let _ = t.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicBool;
    use std::sync::mpsc;

    const LONG: Duration = Duration::from_secs(20);

    #[test]
    fn fifo_with_one_worker() {
        let s = Scheduler::new(0, 1, None);
        let order = Arc::new(Mutex::new(Vec::new()));
        for i in 0..20 {
            let o = order.clone();
            s.spawn(move |_| o.lock().unwrap().push(i));
        }
        assert!(s.wait_idle(LONG));
        assert_eq!(*order.lock().unwrap(), (0..20).collect::<Vec<_>>());
        s.shutdown();
    }

    #[test]
    fn two_workers_run_concurrently() {
        let s = Scheduler::new(0, 2, None);
        let barrier = Arc::new(std::sync::Barrier::new(2));
        let (tx, rx) = mpsc::channel();
        for _ in 0..2 {
            let (b, tx) = (barrier.clone(), tx.clone());
            s.spawn(move |_| {
                b.wait();
                tx.send(()).unwrap();
            });
        }
        for _ in 0..2 {
            rx.recv_timeout(LONG).unwrap();
        }
        s.shutdown();
    }

    #[test]
    fn pause_frees_the_worker_and_resume_queues_last() {
        let s = Scheduler::new(0, 1, None);
        let log = Arc::new(Mutex::new(Vec::new()));
        let handle = s.prepare_pause();
        let running = Arc::new(AtomicUsize::new(0));
        let max_running = Arc::new(AtomicUsize::new(0));
        let enter = {
            let (r, m) = (running.clone(), max_running.clone());
            move || {
                let now = r.fetch_add(1, Ordering::SeqCst) + 1;
                m.fetch_max(now, Ordering::SeqCst);
            }
        };
        {
            let (s2, log, h, enter, r) = (s.clone(), log.clone(), handle.clone(), enter.clone(), running.clone());
            s.spawn(move |_| {
                enter();
                log.lock().unwrap().push("a1");
                r.fetch_sub(1, Ordering::SeqCst);
                s2.pause(&h).unwrap();
                enter();
                log.lock().unwrap().push("a2");
                r.fetch_sub(1, Ordering::SeqCst);
            });
        }
        {
            let (s2, log, enter, r) = (s.clone(), log.clone(), enter.clone(), running.clone());
            s.spawn(move |_| {
                enter();
                log.lock().unwrap().push("b");
                s2.resume(handle);
                r.fetch_sub(1, Ordering::SeqCst);
            });
        }
        {
            let (log, enter, r) = (log.clone(), enter.clone(), running.clone());
            s.spawn(move |_| {
                enter();
                log.lock().unwrap().push("c");
                r.fetch_sub(1, Ordering::SeqCst);
            });
        }
        assert!(s.wait_idle(LONG));
        assert_eq!(*log.lock().unwrap(), vec!["a1", "b", "c", "a2"]);
        assert_eq!(max_running.load(Ordering::SeqCst), 1);
        assert_eq!(s.stats().pauses, 1);
        s.shutdown();
    }

    #[test]
    fn test_lock_semantics() {
        let s = Scheduler::new(0, 1, None);
        let (a, b) = (TaskId(100), TaskId(101));
        assert!(s.test_lock(a, "L"));
        assert_eq!(s.lock_holder("L"), Some(a));
        assert!(!s.test_lock(b, "L"));
        assert_eq!(s.lock_holder("L"), Some(a));
        assert_eq!(s.unlock(b, "L"), Err(SchedulerError::UnlockNotHeld("L".into())));
        s.unlock(a, "L").unwrap();
        assert_eq!(s.lock_holder("L"), None);
        assert_eq!(s.lock(a, "L"), Err(SchedulerError::CalledOutsideTask));
        s.shutdown();
    }

    #[test]
    fn lock_prevents_lost_updates() {
        let s = Scheduler::new(0, 4, None);
        let counter = Arc::new(AtomicU64::new(0));
        let inside = Arc::new(AtomicBool::new(false));
        let overlap = Arc::new(AtomicBool::new(false));
        for _ in 0..10_000 {
            let (s2, c, inside, overlap) = (s.clone(), counter.clone(), inside.clone(), overlap.clone());
            s.spawn(move |id| {
                s2.lock(id, "L").unwrap();
                if inside.swap(true, Ordering::SeqCst) {
                    overlap.store(true, Ordering::SeqCst);
                }
                let v = c.load(Ordering::SeqCst);
                thread::yield_now();
                c.store(v + 1, Ordering::SeqCst);
                inside.store(false, Ordering::SeqCst);
                s2.unlock(id, "L").unwrap();
            });
        }
        assert!(s.wait_idle(Duration::from_secs(120)));
        assert_eq!(counter.load(Ordering::SeqCst), 10_000);
        assert!(!overlap.load(Ordering::SeqCst));
        s.shutdown();
    }

    #[test]
    fn locks_released_on_finish_and_panic() {
        let s = Scheduler::new(0, 1, None);
        let s2 = s.clone();
        s.spawn(move |id| {
            s2.lock(id, "done").unwrap();
        });
        let s3 = s.clone();
        s.spawn(move |id| {
            s3.lock(id, "boom").unwrap();
            panic!("task failure");
        });
        assert!(s.wait_idle(LONG));
        assert_eq!(s.lock_holder("done"), None);
        assert_eq!(s.lock_holder("boom"), None);
        assert_eq!(s.stats().panicked, 1);
        s.shutdown();
    }

    #[test]
    fn locks_reacquired_after_pause() {
        let s = Scheduler::new(0, 1, None);
        let h = s.prepare_pause();
        let log = Arc::new(Mutex::new(Vec::new()));
        let (s1, h1, log1) = (s.clone(), h.clone(), log.clone());
        s.spawn(move |id| {
            s1.lock(id, "L").unwrap();
            s1.lock(id, "K").unwrap();
            s1.pause_releasing_locks(id, &h1).unwrap();
            log1.lock().unwrap().push(format!("a holds {:?}", s1.held_locks(id)));
        });
        let (s2, log2) = (s.clone(), log.clone());
        s.spawn(move |id| {
            assert!(s2.test_lock(id, "L"));
            log2.lock().unwrap().push("b got L".to_string());
            s2.resume(h);
            s2.unlock(id, "L").unwrap();
        });
        assert!(s.wait_idle(LONG));
        assert_eq!(
            *log.lock().unwrap(),
            vec!["b got L".to_string(), "a holds [\"K\", \"L\"]".to_string()]
        );
        s.shutdown();
    }

    #[test]
    fn contended_lock_pauses_until_handover() {
        let s = Scheduler::new(0, 1, None);
        let log = Arc::new(Mutex::new(Vec::new()));
        let gate = s.prepare_pause();
        let (s1, log1, g1) = (s.clone(), log.clone(), gate.clone());
        s.spawn(move |id| {
            s1.lock(id, "L").unwrap();
            log1.lock().unwrap().push("a locked");
            s1.pause(&g1).unwrap();
            log1.lock().unwrap().push("a unlocking");
            s1.unlock(id, "L").unwrap();
        });
        let (s2, log2) = (s.clone(), log.clone());
        s.spawn(move |id| {
            s2.resume(gate);
            s2.lock(id, "L").unwrap();
            log2.lock().unwrap().push("b locked");
        });
        assert!(s.wait_idle(LONG));
        assert_eq!(*log.lock().unwrap(), vec!["a locked", "a unlocking", "b locked"]);
        s.shutdown();
    }

    #[test]
    fn idle_worker_runs_progress_hook() {
        let calls = Arc::new(AtomicU64::new(0));
        let c = calls.clone();
        let hook: ProgressHook = Arc::new(move || {
            c.fetch_add(1, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(1));
        });
        let s = Scheduler::new(0, 2, Some(hook));
        let deadline = std::time::Instant::now() + LONG;
        while calls.load(Ordering::SeqCst) < 5 && std::time::Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        let (tx, rx) = mpsc::channel();
        s.spawn(move |_| tx.send(()).unwrap());
        rx.recv_timeout(LONG).unwrap();
        assert!(calls.load(Ordering::SeqCst) >= 5);
        s.shutdown();
    }
}
