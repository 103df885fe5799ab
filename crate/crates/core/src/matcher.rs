//! Per-rank matching of events to task dependencies.
//!
//! The matcher owns three things: the outstanding task descriptors (with
//! their partially filled instances), the paused waits of running tasks, and
//! the store of events nobody has consumed yet. All of them share one
//! precedence order: a monotonically increasing key taken when a task is
//! submitted or when a task pauses on a wait. Consumers with a lower key get
//! first pick of every arriving event.
//!
//! Matching rules, applied identically on event arrival and when a new
//! consumer is filled from the store:
//!
//! * consumers are offered an event in ascending precedence order;
//! * inside one instance the event goes to the lowest unfilled slot whose
//!   dependency names its exact source, falling back to the lowest unfilled
//!   `ANY` slot with the same identifier;
//! * a persistent descriptor fills its oldest instance first, and only opens
//!   a new instance when none of the existing ones has a free matching slot;
//! * a persistent event passes a copy on to every later consumer in the same
//!   scan (at most one copy each), and one copy stays buffered afterwards.
//!
//! When a consumer is filled from the store, buffered events are offered in
//! arrival order; copies of persistent events re-buffered during that pass are
//! not offered again until the next pass.
//!
//! The matcher is a plain state machine; the runtime serialises access to it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::types::{Event, MatchSource, ResolvedDependency};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchError {
    #[error("a live persistent task is already named {0:?}")]
    DuplicatePersistentName(String),
    #[error("a persistent task needs at least one dependency")]
    ZeroDependencyPersistent,
    #[error("only persistent tasks can be named")]
    NamedTransient,
}

/// A submitted task. `T` is the runtime's task handle.
#[derive(Debug, Clone)]
pub struct TaskDescriptor<T> {
    pub task: T,
    pub dependencies: Vec<ResolvedDependency>,
    pub persistent: bool,
    pub name: Option<String>,
    /// Precedence key, assigned by [`Matcher::register_task`].
    pub submission_index: u64,
}

impl<T> TaskDescriptor<T> {
    pub fn new(task: T, dependencies: Vec<ResolvedDependency>) -> Self {
        TaskDescriptor {
            task,
            dependencies,
            persistent: false,
            name: None,
            submission_index: 0,
        }
    }

    pub fn persistent(mut self) -> Self {
        self.persistent = true;
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

/// Identifies a paused wait registered by a running task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WaitId(pub u64);

/// A task instance whose every slot is filled.
#[derive(Debug, Clone)]
pub struct ReadyTask<T> {
    pub descriptor: Arc<TaskDescriptor<T>>,
    /// Instance number within the descriptor, counting from 0.
    pub instance: u64,
    /// One event per dependency, in dependency order.
    pub events: Vec<Event>,
}

/// Something the scheduler should now run.
#[derive(Debug, Clone)]
pub enum Activation<T> {
    Task(ReadyTask<T>),
    Resume { wait: WaitId, events: Vec<Event> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrieveMode {
    /// Take everything or nothing at all.
    AllOrNothing,
    /// Take whatever subset is currently buffered.
    Available,
}

/// Result of [`Matcher::retrieve_matching`].
#[derive(Debug, Clone)]
pub struct Retrieval {
    /// One entry per requested dependency, `None` where nothing was taken.
    pub slots: Vec<Option<Event>>,
    pub filled: usize,
    pub satisfied: bool,
}

/// Outcome of [`Matcher::register_wait`].
#[derive(Debug, Clone)]
pub enum WaitOutcome {
    Satisfied(Vec<Event>),
    Pending,
}

/// Counts relevant to distributed termination. Persistent descriptors and
/// persistent events are excluded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuiescenceSnapshot {
    pub outstanding_transient: usize,
    pub unconsumed_nonpersistent_events: usize,
    pub filling_transient_instances: usize,
    pub paused_waits: usize,
}

impl QuiescenceSnapshot {
    pub fn is_quiescent(&self) -> bool {
        *self == QuiescenceSnapshot::default()
    }
}

/// Stable summary of one event for state comparisons.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventKey {
    pub source: usize,
    pub identifier: String,
    pub sequence: u64,
    pub persistent: bool,
}

impl From<&Event> for EventKey {
    fn from(e: &Event) -> Self {
        EventKey {
            source: e.source_rank,
            identifier: e.identifier.to_string(),
            sequence: e.sequence,
            persistent: e.persistent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsumerKind {
    Transient,
    Persistent,
    Wait,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsumerState {
    pub order: u64,
    pub kind: ConsumerKind,
    /// Filling instances oldest first, each as its slot contents.
    pub instances: Vec<Vec<Option<EventKey>>>,
}

/// Full observable matcher state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatcherState {
    pub consumers: Vec<ConsumerState>,
    /// Buffered events in arrival order.
    pub buffered: Vec<EventKey>,
}

/// Index of the slot `event` should fill, if any.
pub fn choose_slot(
    deps: &[ResolvedDependency],
    slots: &[Option<Event>],
    event: &Event,
) -> Option<usize> {
    let mut wildcard = None;
    for (i, d) in deps.iter().enumerate() {
        if slots[i].is_some() || *d.identifier != *event.identifier {
            continue;
        }
        match d.source {
            MatchSource::Rank(r) if r == event.source_rank => return Some(i),
            MatchSource::Rank(_) => {}
            MatchSource::Any => {
                wildcard.get_or_insert(i);
            }
        }
    }
    wildcard
}

#[derive(Debug, Clone)]
struct Slots {
    number: u64,
    events: Vec<Option<Event>>,
    filled: usize,
}

impl Slots {
    fn new(number: u64, len: usize) -> Self {
        Slots {
            number,
            events: vec![None; len],
            filled: 0,
        }
    }

    fn put(&mut self, slot: usize, event: Event) {
        debug_assert!(self.events[slot].is_none());
        self.events[slot] = Some(event);
        self.filled += 1;
    }

    fn is_complete(&self) -> bool {
        self.filled == self.events.len()
    }

    fn has_free(&self, deps: &[ResolvedDependency], identifier: &str) -> bool {
        deps.iter()
            .zip(&self.events)
            .any(|(d, e)| e.is_none() && &*d.identifier == identifier)
    }

    fn take(self) -> Vec<Event> {
        self.events
            .into_iter()
            .map(|e| e.expect("complete instance"))
            .collect()
    }
}

#[derive(Debug)]
struct TaskEntry<T> {
    descriptor: Arc<TaskDescriptor<T>>,
    instances: Vec<Slots>,
    next_instance: u64,
}

#[derive(Debug)]
struct WaitEntry {
    id: WaitId,
    deps: Vec<ResolvedDependency>,
    slots: Slots,
}

#[derive(Debug)]
enum Consumer<T> {
    Task(TaskEntry<T>),
    Wait(WaitEntry),
}

impl<T> Consumer<T> {
    fn dependencies(&self) -> &[ResolvedDependency] {
        match self {
            Consumer::Task(t) => &t.descriptor.dependencies,
            Consumer::Wait(w) => &w.deps,
        }
    }
}

/// Buffered events, grouped by identifier and ordered by arrival stamp.
///
/// Within one `(source, identifier)` pair, stamp order is arrival order, which
/// the transports keep equal to the sender's firing order.
#[derive(Debug, Default)]
pub struct PendingEventStore {
    by_id: HashMap<Arc<str>, BTreeMap<u64, Event>>,
    next_stamp: u64,
    len: usize,
    nonpersistent: usize,
}

impl PendingEventStore {
    pub fn push(&mut self, event: Event) -> u64 {
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        self.len += 1;
        if !event.persistent {
            self.nonpersistent += 1;
        }
        self.by_id
            .entry(event.identifier.clone())
            .or_default()
            .insert(stamp, event);
        stamp
    }

    fn remove(&mut self, identifier: &str, stamp: u64) -> Event {
        let queue = self.by_id.get_mut(identifier).expect("identifier queue");
        let event = queue.remove(&stamp).expect("buffered event");
        if queue.is_empty() {
            self.by_id.remove(identifier);
        }
        self.len -= 1;
        if !event.persistent {
            self.nonpersistent -= 1;
        }
        event
    }

    /// Events with `identifier`, stamped before `bound`, oldest first.
    fn scan<'a>(&'a self, identifier: &str, bound: u64) -> impl Iterator<Item = (u64, &'a Event)> + 'a {
        self.by_id
            .get(identifier)
            .into_iter()
            .flat_map(move |q| q.range(..bound).map(|(s, e)| (*s, e)))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nonpersistent_len(&self) -> usize {
        self.nonpersistent
    }

    /// All buffered events in arrival order.
    pub fn snapshot(&self) -> Vec<Event> {
        let mut all: Vec<(u64, &Event)> = self
            .by_id
            .values()
            .flat_map(|q| q.iter().map(|(s, e)| (*s, e)))
            .collect();
        all.sort_by_key(|(s, _)| *s);
        all.into_iter().map(|(_, e)| e.clone()).collect()
    }

    /// Consumes the events at `taken`, re-buffering a copy of each persistent one.
    fn commit(&mut self, taken: &[(Arc<str>, u64)]) {
        let mut taken: Vec<&(Arc<str>, u64)> = taken.iter().collect();
        taken.sort_by_key(|(_, stamp)| *stamp);
        for (id, stamp) in taken {
            let event = self.remove(id, *stamp);
            if event.persistent {
                self.push(event);
            }
        }
    }
}

fn distinct_identifiers(deps: &[ResolvedDependency]) -> Vec<Arc<str>> {
    let mut seen: Vec<Arc<str>> = Vec::new();
    for d in deps {
        if !seen.iter().any(|s| **s == *d.identifier) {
            seen.push(d.identifier.clone());
        }
    }
    seen
}

/// Fills free slots of a single instance from the store. Returns the store
/// positions used; the caller commits them.
fn fill_from_store(
    store: &PendingEventStore,
    deps: &[ResolvedDependency],
    slots: &mut Slots,
    bound: u64,
) -> Vec<(Arc<str>, u64)> {
    let mut taken = Vec::new();
    for id in distinct_identifiers(deps) {
        for (stamp, event) in store.scan(&id, bound) {
            if !slots.has_free(deps, &id) {
                break;
            }
            if let Some(slot) = choose_slot(deps, &slots.events, event) {
                slots.put(slot, event.clone());
                taken.push((id.clone(), stamp));
            }
        }
    }
    taken
}

/// Per-rank matcher state machine.
#[derive(Debug)]
pub struct Matcher<T> {
    next_order: u64,
    consumers: BTreeMap<u64, Consumer<T>>,
    interest: HashMap<Arc<str>, BTreeSet<u64>>,
    named: HashMap<String, u64>,
    store: PendingEventStore,
}

impl<T> Default for Matcher<T> {
    fn default() -> Self {
        Matcher {
            next_order: 0,
            consumers: BTreeMap::new(),
            interest: HashMap::new(),
            named: HashMap::new(),
            store: PendingEventStore::default(),
        }
    }
}

impl<T> Matcher<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&self) -> &PendingEventStore {
        &self.store
    }

    fn insert_consumer(&mut self, order: u64, consumer: Consumer<T>) {
        for id in distinct_identifiers(consumer.dependencies()) {
            self.interest.entry(id).or_default().insert(order);
        }
        self.consumers.insert(order, consumer);
    }

    fn remove_consumer(&mut self, order: u64) -> Option<Consumer<T>> {
        let consumer = self.consumers.remove(&order)?;
        for id in distinct_identifiers(consumer.dependencies()) {
            if let Some(set) = self.interest.get_mut(&id) {
                set.remove(&order);
                if set.is_empty() {
                    self.interest.remove(&id);
                }
            }
        }
        if let Consumer::Task(t) = &consumer {
            if let Some(name) = &t.descriptor.name {
                self.named.remove(name);
            }
        }
        Some(consumer)
    }

    /// Registers a task and returns every instance that is already ready.
    pub fn register_task(
        &mut self,
        mut descriptor: TaskDescriptor<T>,
    ) -> Result<Vec<Activation<T>>, MatchError> {
        if descriptor.persistent && descriptor.dependencies.is_empty() {
            return Err(MatchError::ZeroDependencyPersistent);
        }
        if let Some(name) = &descriptor.name {
            if !descriptor.persistent {
                return Err(MatchError::NamedTransient);
            }
            if self.named.contains_key(name) {
                return Err(MatchError::DuplicatePersistentName(name.clone()));
            }
        }
        let order = self.next_order;
        self.next_order += 1;
        descriptor.submission_index = order;
        let descriptor = Arc::new(descriptor);
        let deps = &descriptor.dependencies;
        let bound = self.store.next_stamp;
        let mut ready = Vec::new();

        if !descriptor.persistent {
            let mut slots = Slots::new(0, deps.len());
            let taken = fill_from_store(&self.store, deps, &mut slots, bound);
            self.store.commit(&taken);
            if slots.is_complete() {
                ready.push(Activation::Task(ReadyTask {
                    descriptor: descriptor.clone(),
                    instance: 0,
                    events: slots.take(),
                }));
            } else {
                let entry = TaskEntry {
                    descriptor: descriptor.clone(),
                    instances: vec![slots],
                    next_instance: 1,
                };
                self.insert_consumer(order, Consumer::Task(entry));
            }
            return Ok(ready);
        }

        // Persistent: every buffered match is consumed, opening instances as needed.
        let mut instances: Vec<Slots> = Vec::new();
        let mut next_instance = 0;
        let mut taken = Vec::new();
        for id in distinct_identifiers(deps) {
            for (stamp, event) in self.store.scan(&id, bound) {
                let placed = instances.iter_mut().find_map(|inst| {
                    choose_slot(deps, &inst.events, event).map(|slot| (inst, slot))
                });
                match placed {
                    Some((inst, slot)) => inst.put(slot, event.clone()),
                    None => {
                        let mut inst = Slots::new(next_instance, deps.len());
                        let Some(slot) = choose_slot(deps, &inst.events, event) else {
                            continue;
                        };
                        next_instance += 1;
                        inst.put(slot, event.clone());
                        instances.push(inst);
                    }
                }
                taken.push((id.clone(), stamp));
            }
        }
        self.store.commit(&taken);
        let (complete, filling): (Vec<Slots>, Vec<Slots>) =
            instances.into_iter().partition(Slots::is_complete);
        for inst in complete {
            ready.push(Activation::Task(ReadyTask {
                descriptor: descriptor.clone(),
                instance: inst.number,
                events: inst.take(),
            }));
        }
        if let Some(name) = &descriptor.name {
            self.named.insert(name.clone(), order);
        }
        let entry = TaskEntry {
            descriptor: descriptor.clone(),
            instances: filling,
            next_instance,
        };
        self.insert_consumer(order, Consumer::Task(entry));
        Ok(ready)
    }

    /// Routes an arriving event and returns everything that became ready.
    pub fn deliver_event(&mut self, event: Event) -> Vec<Activation<T>> {
        let mut ready = Vec::new();
        let keys: Vec<u64> = self
            .interest
            .get(&event.identifier)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for key in keys {
            if self.offer(key, &event, &mut ready) && !event.persistent {
                return ready;
            }
        }
        self.store.push(event);
        ready
    }

    /// Offers `event` to the consumer at `key`; true if it took a copy.
    fn offer(&mut self, key: u64, event: &Event, ready: &mut Vec<Activation<T>>) -> bool {
        let Some(consumer) = self.consumers.get_mut(&key) else {
            return false;
        };
        match consumer {
            Consumer::Wait(w) => {
                let Some(slot) = choose_slot(&w.deps, &w.slots.events, event) else {
                    return false;
                };
                w.slots.put(slot, event.clone());
                if w.slots.is_complete() {
                    if let Some(Consumer::Wait(w)) = self.remove_consumer(key) {
                        ready.push(Activation::Resume {
                            wait: w.id,
                            events: w.slots.take(),
                        });
                    }
                }
                true
            }
            Consumer::Task(t) if !t.descriptor.persistent => {
                let deps = &t.descriptor.dependencies;
                let inst = &mut t.instances[0];
                let Some(slot) = choose_slot(deps, &inst.events, event) else {
                    return false;
                };
                inst.put(slot, event.clone());
                if inst.is_complete() {
                    if let Some(Consumer::Task(mut t)) = self.remove_consumer(key) {
                        let inst = t.instances.pop().expect("transient instance");
                        ready.push(Activation::Task(ReadyTask {
                            descriptor: t.descriptor,
                            instance: inst.number,
                            events: inst.take(),
                        }));
                    }
                }
                true
            }
            Consumer::Task(t) => {
                let deps = &t.descriptor.dependencies;
                let existing = t.instances.iter().enumerate().find_map(|(i, inst)| {
                    choose_slot(deps, &inst.events, event).map(|slot| (i, slot))
                });
                if let Some((i, slot)) = existing {
                    t.instances[i].put(slot, event.clone());
                    if t.instances[i].is_complete() {
                        let inst = t.instances.remove(i);
                        ready.push(Activation::Task(ReadyTask {
                            descriptor: t.descriptor.clone(),
                            instance: inst.number,
                            events: inst.take(),
                        }));
                    }
                    return true;
                }
                if !deps.iter().any(|d| d.matches(event)) {
                    return false;
                }
                // Open a new instance, take what the store already holds, then place the event.
                let mut inst = Slots::new(t.next_instance, deps.len());
                t.next_instance += 1;
                let bound = self.store.next_stamp;
                let taken = fill_from_store(&self.store, deps, &mut inst, bound);
                self.store.commit(&taken);
                let accepted = match choose_slot(deps, &inst.events, event) {
                    Some(slot) => {
                        inst.put(slot, event.clone());
                        true
                    }
                    None => false,
                };
                if inst.is_complete() {
                    ready.push(Activation::Task(ReadyTask {
                        descriptor: t.descriptor.clone(),
                        instance: inst.number,
                        events: inst.take(),
                    }));
                } else {
                    t.instances.push(inst);
                }
                accepted
            }
        }
    }

    /// Takes buffered events for `deps` without registering anything.
    pub fn retrieve_matching(&mut self, deps: &[ResolvedDependency], mode: RetrieveMode) -> Retrieval {
        let mut slots = Slots::new(0, deps.len());
        let bound = self.store.next_stamp;
        let taken = fill_from_store(&self.store, deps, &mut slots, bound);
        let satisfied = slots.is_complete();
        if satisfied || mode == RetrieveMode::Available {
            self.store.commit(&taken);
            Retrieval {
                filled: slots.filled,
                slots: slots.events,
                satisfied,
            }
        } else {
            Retrieval {
                slots: vec![None; deps.len()],
                filled: 0,
                satisfied: false,
            }
        }
    }

    /// Satisfies a wait immediately or records it at the current precedence
    /// position. A recorded wait takes what partial matches the store holds.
    pub fn register_wait(&mut self, deps: Vec<ResolvedDependency>, id: WaitId) -> WaitOutcome {
        let r = self.retrieve_matching(&deps, RetrieveMode::AllOrNothing);
        if r.satisfied {
            return WaitOutcome::Satisfied(r.slots.into_iter().map(|e| e.expect("filled")).collect());
        }
        let order = self.next_order;
        self.next_order += 1;
        let mut slots = Slots::new(0, deps.len());
        let bound = self.store.next_stamp;
        let taken = fill_from_store(&self.store, &deps, &mut slots, bound);
        self.store.commit(&taken);
        self.insert_consumer(order, Consumer::Wait(WaitEntry { id, deps, slots }));
        WaitOutcome::Pending
    }

    /// Stops a named persistent task from arming again. Filling instances are
    /// discarded together with the events they had consumed.
    pub fn remove_persistent_task(&mut self, name: &str) -> bool {
        match self.named.get(name).copied() {
            Some(order) => self.remove_consumer(order).is_some(),
            None => false,
        }
    }

    pub fn quiescence_snapshot(&self) -> QuiescenceSnapshot {
        let mut snap = QuiescenceSnapshot {
            unconsumed_nonpersistent_events: self.store.nonpersistent_len(),
            ..Default::default()
        };
        for c in self.consumers.values() {
            match c {
                Consumer::Task(t) if !t.descriptor.persistent => {
                    snap.outstanding_transient += 1;
                    snap.filling_transient_instances += t.instances.len();
                }
                Consumer::Task(_) => {}
                Consumer::Wait(_) => snap.paused_waits += 1,
            }
        }
        snap
    }

    pub fn persistent_task_count(&self) -> usize {
        self.consumers
            .values()
            .filter(|c| matches!(c, Consumer::Task(t) if t.descriptor.persistent))
            .count()
    }

    pub fn state(&self) -> MatcherState {
        let keys = |slots: &Slots| slots.events.iter().map(|e| e.as_ref().map(EventKey::from)).collect();
        let consumers = self
            .consumers
            .iter()
            .map(|(order, c)| match c {
                Consumer::Task(t) => ConsumerState {
                    order: *order,
                    kind: if t.descriptor.persistent {
                        ConsumerKind::Persistent
                    } else {
                        ConsumerKind::Transient
                    },
                    instances: t.instances.iter().map(keys).collect(),
                },
                Consumer::Wait(w) => ConsumerState {
                    order: *order,
                    kind: ConsumerKind::Wait,
                    instances: vec![keys(&w.slots)],
                },
            })
            .collect();
        MatcherState {
            consumers,
            buffered: self.store.snapshot().iter().map(EventKey::from).collect(),
        }
    }
}
