use std::sync::Arc;

use super::{Result, Runtime};
use crate::scheduler::TaskId;
use crate::types::{DependencyDescriptor, Event, Payload, RankSpec};

/// A task body. Receives its events in dependency order.
pub type TaskFn = Arc<dyn Fn(&TaskContext, &[Event]) + Send + Sync>;

/// What a running task can do.
#[derive(Debug, Clone)]
pub struct TaskContext {
    rt: Runtime,
    task: TaskId,
    name: Option<String>,
    instance: u64,
}

impl TaskContext {
    pub(super) fn new(rt: Runtime, task: TaskId, name: Option<String>, instance: u64) -> Self {
        TaskContext {
            rt,
            task,
            name,
            instance,
        }
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    pub fn rank(&self) -> usize {
        self.rt.rank()
    }

    pub fn world_size(&self) -> usize {
        self.rt.world_size()
    }

    pub fn task_id(&self) -> TaskId {
        self.task
    }

    /// Name of the persistent task this instance belongs to.
    pub fn task_name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    /// Activation number, counting from 0. Always 0 for transient tasks.
    pub fn instance(&self) -> u64 {
        self.instance
    }

    pub fn fire(&self, payload: Payload, target: impl Into<RankSpec>, identifier: &str) -> Result<()> {
        self.rt.fire(payload, target, identifier)
    }

    pub fn fire_persistent(&self, payload: Payload, target: impl Into<RankSpec>, identifier: &str) -> Result<()> {
        self.rt.fire_persistent(payload, target, identifier)
    }

    pub fn submit<F>(&self, deps: &[DependencyDescriptor], body: F) -> Result<()>
    where
        F: Fn(&TaskContext, &[Event]) + Send + Sync + 'static,
    {
        self.rt.submit(deps, body)
    }

    pub fn submit_persistent<F>(&self, deps: &[DependencyDescriptor], body: F) -> Result<()>
    where
        F: Fn(&TaskContext, &[Event]) + Send + Sync + 'static,
    {
        self.rt.submit_persistent(deps, body)
    }

    pub fn submit_named_persistent<F>(&self, name: &str, deps: &[DependencyDescriptor], body: F) -> Result<()>
    where
        F: Fn(&TaskContext, &[Event]) + Send + Sync + 'static,
    {
        self.rt.submit_named_persistent(name, deps, body)
    }

    /// Returns the events for `deps`, pausing this task until they arrive.
    /// Locks held now are released for the pause and held again on return.
    pub fn wait(&self, deps: &[DependencyDescriptor]) -> Result<Vec<Event>> {
        self.rt.wait_as(self.task, deps)
    }

    /// Takes whatever subset of `deps` is buffered now. Never pauses.
    pub fn retrieve_any(&self, deps: &[DependencyDescriptor]) -> Result<(Vec<Option<Event>>, usize)> {
        self.rt.retrieve_any(deps)
    }

    pub fn lock(&self, name: &str) -> Result<()> {
        Ok(self.rt.shared.scheduler.lock(self.task, name)?)
    }

    pub fn unlock(&self, name: &str) -> Result<()> {
        Ok(self.rt.shared.scheduler.unlock(self.task, name)?)
    }

    /// Acquires `name` if it is free and reports whether it did.
    pub fn test_lock(&self, name: &str) -> bool {
        self.rt.shared.scheduler.test_lock(self.task, name)
    }

    /// Names of the locks this task holds, in order.
    pub fn held_locks(&self) -> Vec<String> {
        self.rt.shared.scheduler.held_locks(self.task)
    }

    pub fn remove_persistent_task(&self, name: &str) -> bool {
        self.rt.remove_persistent_task(name)
    }
}
