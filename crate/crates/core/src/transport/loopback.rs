//! In-process delivery hub shared by every rank of a world.
//!
//! In immediate mode a send lands straight in the target's inbox. In
//! deterministic mode sends are parked in per `(source, target)` queues and
//! only move to inboxes through [`LoopbackHub::deterministic_step`], which
//! picks the next pair with a seeded RNG. Pair queues are FIFO, so the chosen
//! schedule never reorders one sender's frames to one receiver.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_rank, Frame, Transport, TransportError};

/// One frame moved from a pair queue to an inbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub source: usize,
    pub target: usize,
    /// Event sequence number, or token round for termination frames.
    pub sequence: u64,
    pub is_event: bool,
}

impl Delivery {
    fn of(target: usize, frame: &Frame) -> Self {
        let (sequence, is_event) = match frame {
            Frame::Event(e) => (e.sequence, true),
            Frame::Control { message, .. } => match message {
                super::Control::Token(t) => (t.round, false),
                super::Control::Terminate { round } => (*round, false),
                super::Control::Goodbye => (0, false),
            },
        };
        Delivery {
            source: frame.source(),
            target,
            sequence,
            is_event,
        }
    }
}

#[derive(Debug)]
struct HubState {
    inboxes: Vec<VecDeque<Frame>>,
    pending: BTreeMap<(usize, usize), VecDeque<Frame>>,
    rng: Option<ChaCha8Rng>,
    killed: Vec<bool>,
    departed: Vec<bool>,
    trace: Vec<Delivery>,
}

impl HubState {
    fn step(&mut self) -> Result<Delivery, TransportError> {
        let rng = self.rng.as_mut().ok_or(TransportError::NothingQueued)?;
        let live: Vec<(usize, usize)> = self
            .pending
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(k, _)| *k)
            .collect();
        if live.is_empty() {
            return Err(TransportError::NothingQueued);
        }
        let pair = live[rng.gen_range(0..live.len())];
        let queue = self.pending.get_mut(&pair).expect("live pair");
        let frame = queue.pop_front().expect("non-empty pair");
        if queue.is_empty() {
            self.pending.remove(&pair);
        }
        let delivery = Delivery::of(pair.1, &frame);
        self.trace.push(delivery);
        if !self.departed[pair.1] {
            self.inboxes[pair.1].push_back(frame);
        }
        Ok(delivery)
    }
}

/// Delivery hub for a world of in-process ranks.
#[derive(Debug)]
pub struct LoopbackHub {
    world_size: usize,
    state: Mutex<HubState>,
    wake: Condvar,
}

impl LoopbackHub {
    fn build(world_size: usize, rng: Option<ChaCha8Rng>) -> Arc<Self> {
        assert!(world_size >= 1, "a world needs at least one rank");
        Arc::new(LoopbackHub {
            world_size,
            state: Mutex::new(HubState {
                inboxes: vec![VecDeque::new(); world_size],
                pending: BTreeMap::new(),
                rng,
                killed: vec![false; world_size],
                departed: vec![false; world_size],
                trace: Vec::new(),
            }),
            wake: Condvar::new(),
        })
    }

    /// Frames go straight to the target inbox.
    pub fn new(world_size: usize) -> Arc<Self> {
        Self::build(world_size, None)
    }

    /// Frames wait in pair queues until a seeded step moves them.
    pub fn deterministic(world_size: usize, schedule_seed: u64) -> Arc<Self> {
        Self::build(world_size, Some(ChaCha8Rng::seed_from_u64(schedule_seed)))
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn is_deterministic(&self) -> bool {
        self.lock().rng.is_some()
    }

    fn lock(&self) -> MutexGuard<'_, HubState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn endpoint(self: &Arc<Self>, rank: usize) -> Result<LoopbackTransport, TransportError> {
        check_rank(rank, self.world_size)?;
        Ok(LoopbackTransport {
            hub: self.clone(),
            rank,
        })
    }

    /// Delivers exactly one parked frame, chosen by the seeded schedule.
    pub fn deterministic_step(&self) -> Result<Delivery, TransportError> {
        let d = self.lock().step()?;
        self.wake.notify_all();
        Ok(d)
    }

    /// Frames sent but not yet polled by their target.
    pub fn in_flight(&self) -> usize {
        let st = self.lock();
        st.pending.values().map(VecDeque::len).sum::<usize>()
            + st.inboxes.iter().map(VecDeque::len).sum::<usize>()
    }

    /// Takes the frames already delivered to `rank` without stepping the
    /// schedule. For harnesses that drive delivery one step at a time.
    pub fn drain_inbox(&self, rank: usize) -> Vec<Frame> {
        self.lock().inboxes[rank].drain(..).collect()
    }

    /// Frames parked in pair queues, not yet moved to an inbox.
    pub fn parked(&self) -> usize {
        self.lock().pending.values().map(VecDeque::len).sum()
    }

    /// Every delivery made by the deterministic schedule so far.
    pub fn trace(&self) -> Vec<Delivery> {
        self.lock().trace.clone()
    }

    /// Simulates `rank` dying: peers see `TransportClosed`.
    pub fn kill(&self, rank: usize) {
        self.lock().killed[rank] = true;
        self.wake.notify_all();
    }

    fn send(&self, source: usize, target: usize, frame: Frame) -> Result<(), TransportError> {
        check_rank(target, self.world_size)?;
        {
            let mut st = self.lock();
            if st.killed[source] || st.killed[target] {
                return Err(TransportError::TransportClosed);
            }
            if st.departed[source] || st.departed[target] {
                return Ok(());
            }
            if st.rng.is_some() {
                st.pending.entry((source, target)).or_default().push_back(frame);
            } else {
                st.inboxes[target].push_back(frame);
            }
        }
        self.wake.notify_all();
        Ok(())
    }

    fn poll(&self, rank: usize, timeout: Duration) -> Result<Vec<Frame>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if st.killed[rank] {
                return Err(TransportError::TransportClosed);
            }
            if st.rng.is_some() && st.step().is_ok() {
                self.wake.notify_all();
            }
            if !st.inboxes[rank].is_empty() {
                return Ok(st.inboxes[rank].drain(..).collect());
            }
            if st.killed.iter().any(|&k| k) {
                return Err(TransportError::TransportClosed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Vec::new());
            }
            st = self
                .wake
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn depart(&self, rank: usize) {
        let mut st = self.lock();
        st.departed[rank] = true;
        st.inboxes[rank].clear();
        drop(st);
        self.wake.notify_all();
    }
}

/// One rank's handle on a [`LoopbackHub`].
#[derive(Debug, Clone)]
pub struct LoopbackTransport {
    hub: Arc<LoopbackHub>,
    rank: usize,
}

impl LoopbackTransport {
    pub fn hub(&self) -> &Arc<LoopbackHub> {
        &self.hub
    }
}

impl Transport for LoopbackTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.hub.world_size
    }

    fn send(&self, target: usize, frame: Frame) -> Result<(), TransportError> {
        if let Frame::Event(e) = &frame {
            if e.payload.is_address() && target != self.rank {
                return Err(TransportError::AddressNotSerializable);
            }
        }
        self.hub.send(self.rank, target, frame)
    }

    fn poll(&self, timeout: Duration) -> Result<Vec<Frame>, TransportError> {
        self.hub.poll(self.rank, timeout)
    }

    fn shutdown(&self) {
        self.hub.depart(self.rank);
    }

    fn abort(&self) {
        self.hub.kill(self.rank);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Event, Payload};

    fn frame(src: usize, seq: u64) -> Frame {
        Frame::Event(Event::new(src, "e", Payload::none(), false, seq).unwrap())
    }

    fn seqs(frames: &[Frame]) -> Vec<u64> {
        frames
            .iter()
            .map(|f| match f {
                Frame::Event(e) => e.sequence,
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn immediate_mode_preserves_order() {
        let hub = LoopbackHub::new(2);
        let a = hub.endpoint(0).unwrap();
        let b = hub.endpoint(1).unwrap();
        for s in 0..3 {
            a.send(1, frame(0, s)).unwrap();
        }
        assert_eq!(seqs(&b.poll(Duration::ZERO).unwrap()), vec![0, 1, 2]);
        assert!(b.poll(Duration::from_millis(1)).unwrap().is_empty());
    }

    #[test]
    fn unknown_rank() {
        let hub = LoopbackHub::new(2);
        let a = hub.endpoint(0).unwrap();
        assert_eq!(
            a.send(2, frame(0, 0)),
            Err(TransportError::UnknownRank {
                rank: 2,
                world_size: 2
            })
        );
        assert!(hub.endpoint(5).is_err());
    }

    #[test]
    fn deterministic_step_on_empty_hub() {
        let hub = LoopbackHub::deterministic(3, 1);
        assert_eq!(hub.deterministic_step(), Err(TransportError::NothingQueued));
        assert_eq!(LoopbackHub::new(3).deterministic_step(), Err(TransportError::NothingQueued));
    }

    fn scripted_trace(seed: u64) -> Vec<Delivery> {
        let hub = LoopbackHub::deterministic(3, seed);
        let eps: Vec<_> = (0..3).map(|r| hub.endpoint(r).unwrap()).collect();
        for s in 0..20u64 {
            for src in 0..3 {
                eps[src].send(((src as u64 + s) % 3) as usize, frame(src, s)).unwrap();
            }
        }
        while hub.deterministic_step().is_ok() {}
        hub.trace()
    }

    #[test]
    fn same_seed_same_trace() {
        assert_eq!(scripted_trace(7), scripted_trace(7));
        assert_ne!(scripted_trace(7), scripted_trace(8));
    }

    #[test]
    fn random_schedule_keeps_pair_fifo() {
        let hub = LoopbackHub::deterministic(4, 99);
        let eps: Vec<_> = (0..4).map(|r| hub.endpoint(r).unwrap()).collect();
        let mut next = [[0u64; 4]; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let (s, t) = (rng.gen_range(0..4), rng.gen_range(0..4));
            eps[s].send(t, frame(s, next[s][t])).unwrap();
            next[s][t] += 1;
        }
        let mut seen = [[0u64; 4]; 4];
        let mut steps = 0;
        while let Ok(d) = hub.deterministic_step() {
            assert_eq!(d.sequence, seen[d.source][d.target]);
            seen[d.source][d.target] += 1;
            steps += 1;
        }
        assert_eq!(steps, 10_000);
        assert_eq!(seen, next);
    }

    #[test]
    fn killed_peer_surfaces_as_closed() {
        let hub = LoopbackHub::new(2);
        let a = hub.endpoint(0).unwrap();
        hub.kill(1);
        assert_eq!(a.poll(Duration::from_millis(1)), Err(TransportError::TransportClosed));
        assert_eq!(a.send(1, frame(0, 0)), Err(TransportError::TransportClosed));
    }

    #[test]
    fn address_payload_stays_local() {
        let hub = LoopbackHub::new(2);
        let a = hub.endpoint(0).unwrap();
        let e = Event::new(0, "d", Payload::address(Arc::new(1u32)), false, 0).unwrap();
        assert_eq!(a.send(1, Frame::Event(e.clone())), Err(TransportError::AddressNotSerializable));
        a.send(0, Frame::Event(e)).unwrap();
    }
}
