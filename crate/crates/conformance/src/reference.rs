//! A deliberately naive matcher used as an oracle.
//!
//! Everything lives in flat vectors and every operation rescans them from
//! the start. The buffer is one list in arrival order; there are no
//! per-identifier indexes, interest sets or stamps.

use edat::matcher::{ConsumerKind, ConsumerState, EventKey, MatcherState};
use edat::{Event, MatchSource, ResolvedDependency};

/// What became runnable, identified independently of handle types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefActivation {
    Task {
        order: u64,
        instance: u64,
        events: Vec<EventKey>,
    },
    Resume {
        wait: u64,
        events: Vec<EventKey>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefError {
    ZeroDependencyPersistent,
}

#[derive(Debug, Clone)]
struct Consumer {
    order: u64,
    kind: ConsumerKind,
    deps: Vec<ResolvedDependency>,
    /// For waits: the wait id.
    wait: u64,
    instances: Vec<(u64, Vec<Option<Event>>)>,
    opened: u64,
}

#[derive(Debug, Default, Clone)]
pub struct ReferenceMatcher {
    next_order: u64,
    consumers: Vec<Consumer>,
    buffer: Vec<Event>,
}

fn source_is(d: &ResolvedDependency, e: &Event) -> bool {
    matches!(d.source, MatchSource::Rank(r) if r == e.source_rank)
}

/// Concrete-source slots first, then wildcard slots, lowest index within each.
fn slot_for(deps: &[ResolvedDependency], slots: &[Option<Event>], e: &Event) -> Option<usize> {
    let free = |i: usize| slots[i].is_none() && *deps[i].identifier == *e.identifier;
    let exact = (0..deps.len()).find(|&i| free(i) && source_is(&deps[i], e));
    exact.or_else(|| (0..deps.len()).find(|&i| free(i) && deps[i].source == MatchSource::Any))
}

fn complete(slots: &[Option<Event>]) -> bool {
    slots.iter().all(Option::is_some)
}

fn keys(slots: &[Option<Event>]) -> Vec<EventKey> {
    slots.iter().map(|e| EventKey::from(e.as_ref().expect("complete"))).collect()
}

fn any_dep_matches(deps: &[ResolvedDependency], e: &Event) -> bool {
    deps.iter().any(|d| {
        *d.identifier == *e.identifier && (d.source == MatchSource::Any || source_is(d, e))
    })
}

impl ReferenceMatcher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills one slot list from the buffer in arrival order. Taken
    /// persistent events are appended back after the pass.
    fn prefill(&mut self, deps: &[ResolvedDependency], slots: &mut [Option<Event>]) {
        let mut keep = Vec::new();
        let mut again = Vec::new();
        for e in std::mem::take(&mut self.buffer) {
            match slot_for(deps, slots, &e) {
                Some(i) => {
                    if e.persistent {
                        again.push(e.clone());
                    }
                    slots[i] = Some(e);
                }
                None => keep.push(e),
            }
        }
        keep.extend(again);
        self.buffer = keep;
    }

    pub fn submit(
        &mut self,
        deps: Vec<ResolvedDependency>,
        persistent: bool,
    ) -> Result<Vec<RefActivation>, RefError> {
        if persistent && deps.is_empty() {
            return Err(RefError::ZeroDependencyPersistent);
        }
        let order = self.next_order;
        self.next_order += 1;
        let mut out = Vec::new();
        if !persistent {
            let mut slots = vec![None; deps.len()];
            self.prefill(&deps, &mut slots);
            if complete(&slots) {
                out.push(RefActivation::Task {
                    order,
                    instance: 0,
                    events: keys(&slots),
                });
            } else {
                self.consumers.push(Consumer {
                    order,
                    kind: ConsumerKind::Transient,
                    deps,
                    wait: 0,
                    instances: vec![(0, slots)],
                    opened: 1,
                });
            }
            return Ok(out);
        }
        let mut instances: Vec<(u64, Vec<Option<Event>>)> = Vec::new();
        let mut keep = Vec::new();
        let mut again = Vec::new();
        for e in std::mem::take(&mut self.buffer) {
            let mut placed = false;
            for (_, slots) in instances.iter_mut() {
                if let Some(i) = slot_for(&deps, slots, &e) {
                    slots[i] = Some(e.clone());
                    placed = true;
                    break;
                }
            }
            if !placed {
                let mut slots = vec![None; deps.len()];
                if let Some(i) = slot_for(&deps, &slots, &e) {
                    slots[i] = Some(e.clone());
                    instances.push((instances.len() as u64, slots));
                    placed = true;
                }
            }
            if placed {
                if e.persistent {
                    again.push(e);
                }
            } else {
                keep.push(e);
            }
        }
        keep.extend(again);
        self.buffer = keep;
        let opened = instances.len() as u64;
        let mut filling = Vec::new();
        for (n, slots) in instances {
            if complete(&slots) {
                out.push(RefActivation::Task {
                    order,
                    instance: n,
                    events: keys(&slots),
                });
            } else {
                filling.push((n, slots));
            }
        }
        self.consumers.push(Consumer {
            order,
            kind: ConsumerKind::Persistent,
            deps,
            wait: 0,
            instances: filling,
            opened,
        });
        Ok(out)
    }

    /// All-or-nothing take from the buffer; otherwise a partially filled
    /// wait record at the next precedence position.
    pub fn wait(&mut self, deps: Vec<ResolvedDependency>, wait: u64) -> Option<Vec<EventKey>> {
        let saved = self.buffer.clone();
        let mut slots = vec![None; deps.len()];
        self.prefill(&deps, &mut slots);
        if complete(&slots) {
            return Some(keys(&slots));
        }
        self.buffer = saved;
        let order = self.next_order;
        self.next_order += 1;
        let mut slots = vec![None; deps.len()];
        self.prefill(&deps, &mut slots);
        self.consumers.push(Consumer {
            order,
            kind: ConsumerKind::Wait,
            deps,
            wait,
            instances: vec![(0, slots)],
            opened: 1,
        });
        None
    }

    pub fn deliver(&mut self, e: Event) -> Vec<RefActivation> {
        let mut out = Vec::new();
        let mut idx = 0;
        while idx < self.consumers.len() {
            let took = self.offer(idx, &e, &mut out);
            let removed = self.consumers[idx].instances.is_empty() && self.consumers[idx].kind != ConsumerKind::Persistent;
            if removed {
                self.consumers.remove(idx);
            } else {
                idx += 1;
            }
            if took && !e.persistent {
                return out;
            }
        }
        self.buffer.push(e);
        out
    }

    fn offer(&mut self, idx: usize, e: &Event, out: &mut Vec<RefActivation>) -> bool {
        let c = &mut self.consumers[idx];
        match c.kind {
            ConsumerKind::Transient | ConsumerKind::Wait => {
                let slots = &mut c.instances[0].1;
                let Some(i) = slot_for(&c.deps, slots, e) else {
                    return false;
                };
                slots[i] = Some(e.clone());
                if complete(slots) {
                    let events = keys(slots);
                    out.push(if c.kind == ConsumerKind::Wait {
                        RefActivation::Resume { wait: c.wait, events }
                    } else {
                        RefActivation::Task {
                            order: c.order,
                            instance: 0,
                            events,
                        }
                    });
                    c.instances.clear();
                }
                true
            }
            ConsumerKind::Persistent => {
                for k in 0..c.instances.len() {
                    if let Some(i) = slot_for(&c.deps, &c.instances[k].1, e) {
                        c.instances[k].1[i] = Some(e.clone());
                        if complete(&c.instances[k].1) {
                            let (n, slots) = c.instances.remove(k);
                            out.push(RefActivation::Task {
                                order: c.order,
                                instance: n,
                                events: keys(&slots),
                            });
                        }
                        return true;
                    }
                }
                if !any_dep_matches(&c.deps, e) {
                    return false;
                }
                let deps = c.deps.clone();
                let number = c.opened;
                c.opened += 1;
                let mut slots = vec![None; deps.len()];
                self.prefill(&deps, &mut slots);
                let took = match slot_for(&deps, &slots, e) {
                    Some(i) => {
                        slots[i] = Some(e.clone());
                        true
                    }
                    None => false,
                };
                let c = &mut self.consumers[idx];
                if complete(&slots) {
                    out.push(RefActivation::Task {
                        order: c.order,
                        instance: number,
                        events: keys(&slots),
                    });
                } else {
                    c.instances.push((number, slots));
                }
                took
            }
        }
    }

    pub fn state(&self) -> MatcherState {
        MatcherState {
            consumers: self
                .consumers
                .iter()
                .map(|c| ConsumerState {
                    order: c.order,
                    kind: c.kind,
                    instances: c
                        .instances
                        .iter()
                        .map(|(_, s)| s.iter().map(|e| e.as_ref().map(EventKey::from)).collect())
                        .collect(),
                })
                .collect(),
            buffered: self.buffer.iter().map(EventKey::from).collect(),
        }
    }
}
