//! Single-threaded simulation of the termination protocol.
//!
//! Every rank owns a real [`Matcher`] and [`TerminationDetector`]; frames
//! travel through a deterministic [`LoopbackHub`]. A seeded scheduler picks
//! one enabled action at a time: deliver a parked frame, advance a main
//! program, run a ready task, or let rank 0 start a round. The counters and
//! local quiescence rule follow the runtime: self-fires bypass the transport
//! and are not counted, `fired` grows at send and `received` at delivery.
//!
//! The oracle sees the whole world at once. When rank 0 declares
//! termination, every rank must be quiescent and nothing may be in flight.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edat::matcher::{Activation, Matcher, TaskDescriptor};
use edat::runtime::termination::{LocalStatus, TerminationDetector, TokenAction, TokenColor};
use edat::transport::{Control, Frame, LoopbackHub, LoopbackTransport, Transport};
use edat::{Event, MatchSource, Payload, ResolvedDependency};

const SINK: &str = "p";
const HOP: &str = "hop";

#[derive(Debug, Clone)]
pub struct Fire {
    pub target: usize,
    pub identifier: String,
    pub persistent: bool,
    /// Hops carry a time-to-live; relays forward them until it reaches zero.
    pub ttl: Option<i32>,
}

/// A transient task in the plan.
#[derive(Debug, Clone)]
pub struct Node {
    pub rank: usize,
    pub deps: Vec<ResolvedDependency>,
    pub fires: Vec<Fire>,
    /// Nodes submitted on the same rank when this one runs.
    pub spawns: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum MainOp {
    Submit(usize),
    SubmitSink,
    /// A persistent task that forwards every hop it receives, sometimes
    /// forking it in two.
    SubmitRelay,
    Fire(Fire),
}

/// A workload in which every non-persistent event has exactly one consumer
/// that eventually subscribes, unless `orphan` adds one that never does.
#[derive(Debug, Clone)]
pub struct Workload {
    pub world_size: usize,
    pub nodes: Vec<Node>,
    pub mains: Vec<Vec<MainOp>>,
    pub events: usize,
}

pub fn generate(rng: &mut impl Rng, orphan: bool) -> Workload {
    let p = rng.gen_range(1..=4);
    let mut nodes: Vec<Node> = Vec::new();
    let mut mains: Vec<Vec<MainOp>> = vec![Vec::new(); p];
    let new_node = |nodes: &mut Vec<Node>, rank| {
        nodes.push(Node {
            rank,
            deps: Vec::new(),
            fires: Vec::new(),
            spawns: Vec::new(),
        });
        nodes.len() - 1
    };
    for (r, main) in mains.iter_mut().enumerate() {
        for _ in 0..rng.gen_range(0..=2) {
            let n = new_node(&mut nodes, r);
            main.push(MainOp::Submit(n));
        }
    }
    let events = rng.gen_range(0..=16);
    for k in 0..events {
        let producer = if nodes.is_empty() || rng.gen_bool(0.3) {
            None
        } else {
            Some(rng.gen_range(0..nodes.len()))
        };
        let source = producer.map_or_else(|| rng.gen_range(0..p), |n| nodes[n].rank);
        let target = rng.gen_range(0..p);
        let identifier = format!("e{k}");
        let dep_source = if rng.gen_bool(0.3) {
            MatchSource::Any
        } else {
            MatchSource::Rank(source)
        };
        let dep = ResolvedDependency::new(dep_source, identifier.as_str());
        // Joins only attach to nodes created after the producer, so the
        // plan stays acyclic in creation order.
        let floor = producer.map_or(0, |n| n + 1);
        let joinable: Vec<usize> = (floor..nodes.len()).filter(|&n| nodes[n].rank == target).collect();
        if !joinable.is_empty() && rng.gen_bool(0.3) {
            let n = *joinable.choose(rng).expect("non-empty");
            nodes[n].deps.push(dep);
        } else {
            let spawners: Vec<usize> = (0..nodes.len()).filter(|&n| nodes[n].rank == target).collect();
            let c = new_node(&mut nodes, target);
            nodes[c].deps.push(dep);
            match spawners.choose(rng) {
                Some(&s) if rng.gen_bool(0.5) => nodes[s].spawns.push(c),
                _ => mains[target].push(MainOp::Submit(c)),
            }
        }
        let fire = Fire {
            target,
            identifier,
            persistent: false,
            ttl: None,
        };
        match producer {
            Some(n) => nodes[n].fires.push(fire),
            None => mains[source].push(MainOp::Fire(fire)),
        }
    }
    for main in mains.iter_mut() {
        if rng.gen_bool(0.5) {
            main.push(MainOp::SubmitSink);
        }
    }
    for _ in 0..rng.gen_range(0..=3) {
        let fire = Fire {
            target: rng.gen_range(0..p),
            identifier: SINK.to_string(),
            persistent: true,
            ttl: None,
        };
        if !nodes.is_empty() && rng.gen_bool(0.5) {
            let n = rng.gen_range(0..nodes.len());
            nodes[n].fires.push(fire);
        } else {
            mains[rng.gen_range(0..p)].push(MainOp::Fire(fire));
        }
    }
    if rng.gen_bool(0.6) {
        for main in mains.iter_mut() {
            main.push(MainOp::SubmitRelay);
        }
        for _ in 0..rng.gen_range(1..=6) {
            let fire = Fire {
                target: rng.gen_range(0..p),
                identifier: HOP.to_string(),
                persistent: false,
                ttl: Some(rng.gen_range(0..=10)),
            };
            if !nodes.is_empty() && rng.gen_bool(0.5) {
                let n = rng.gen_range(0..nodes.len());
                nodes[n].fires.push(fire);
            } else {
                mains[rng.gen_range(0..p)].push(MainOp::Fire(fire));
            }
        }
    }
    if orphan {
        let fire = Fire {
            target: rng.gen_range(0..p),
            identifier: "orphan".to_string(),
            persistent: false,
            ttl: None,
        };
        mains[rng.gen_range(0..p)].push(MainOp::Fire(fire));
    }
    for main in mains.iter_mut() {
        main.shuffle(rng);
    }
    Workload {
        world_size: p,
        nodes,
        mains,
        events,
    }
}

#[derive(Debug, Clone, Copy)]
enum Body {
    Node(usize),
    Sink,
    Relay,
}

struct Rank {
    matcher: Matcher<Body>,
    detector: TerminationDetector,
    transport: LoopbackTransport,
    ready: VecDeque<(Body, Vec<Event>)>,
    main_pos: usize,
    fired: u64,
    received: u64,
    sequence: u64,
    terminate_seen: bool,
}

/// Outcome of one simulated run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimOutcome {
    pub terminated: bool,
    pub steps: usize,
    pub rounds: u64,
    /// Rounds rank 0 started after the world became quiescent.
    pub rounds_after_quiescence: u64,
    /// Rounds that came back white with zero deficit while the world was
    /// still busy; a single-round verdict would have been wrong.
    pub deceptive_rounds: u64,
    pub nodes_run: usize,
}

struct Sim<'a> {
    plan: &'a Workload,
    hub: Arc<LoopbackHub>,
    ranks: Vec<Rank>,
    events_in_flight: usize,
    outcome: SimOutcome,
}

impl<'a> Sim<'a> {
    fn new(plan: &'a Workload, schedule_seed: u64) -> Self {
        let p = plan.world_size;
        let hub = LoopbackHub::deterministic(p, schedule_seed);
        let ranks = (0..p)
            .map(|r| Rank {
                matcher: Matcher::new(),
                detector: TerminationDetector::new(r, p),
                transport: hub.endpoint(r).expect("rank in range"),
                ready: VecDeque::new(),
                main_pos: 0,
                fired: 0,
                received: 0,
                sequence: 0,
                terminate_seen: false,
            })
            .collect();
        Sim {
            plan,
            hub,
            ranks,
            events_in_flight: 0,
            outcome: SimOutcome::default(),
        }
    }

    fn finalising(&self, r: usize) -> bool {
        self.ranks[r].main_pos == self.plan.mains[r].len()
    }

    fn local_status(&self, r: usize) -> LocalStatus {
        let rank = &self.ranks[r];
        LocalStatus {
            quiescent: self.finalising(r)
                && rank.ready.is_empty()
                && rank.matcher.quiescence_snapshot().is_quiescent(),
            fired: rank.fired,
            received: rank.received,
        }
    }

    fn world_quiescent(&self) -> bool {
        self.events_in_flight == 0 && (0..self.ranks.len()).all(|r| self.local_status(r).quiescent)
    }

    fn activate(&mut self, r: usize, acts: Vec<Activation<Body>>) {
        for a in acts {
            if let Activation::Task(t) = a {
                self.ranks[r].ready.push_back((t.descriptor.task, t.events));
            }
        }
    }

    fn submit(&mut self, r: usize, body: Body, deps: Vec<ResolvedDependency>, persistent: bool) {
        let mut d = TaskDescriptor::new(body, deps);
        d.persistent = persistent;
        let acts = self.ranks[r].matcher.register_task(d).expect("valid descriptor");
        self.activate(r, acts);
    }

    fn fire(&mut self, r: usize, f: &Fire) {
        let rank = &mut self.ranks[r];
        let payload = f.ttl.map_or_else(Payload::none, |t| Payload::ints(&[t]));
        let event = Event::new(r, f.identifier.as_str(), payload, f.persistent, rank.sequence)
            .expect("valid event");
        rank.sequence += 1;
        if f.target == r {
            let acts = rank.matcher.deliver_event(event);
            self.activate(r, acts);
        } else {
            rank.fired += 1;
            self.events_in_flight += 1;
            rank.transport
                .send(f.target, Frame::Event(event))
                .expect("loopback send");
        }
    }

    fn main_step(&mut self, r: usize) {
        let op = self.plan.mains[r][self.ranks[r].main_pos].clone();
        self.ranks[r].main_pos += 1;
        match op {
            MainOp::Submit(n) => {
                let deps = self.plan.nodes[n].deps.clone();
                self.submit(r, Body::Node(n), deps, false);
            }
            MainOp::SubmitSink => {
                let deps = vec![ResolvedDependency::new(MatchSource::Any, SINK)];
                self.submit(r, Body::Sink, deps, true);
            }
            MainOp::SubmitRelay => {
                let deps = vec![ResolvedDependency::new(MatchSource::Any, HOP)];
                self.submit(r, Body::Relay, deps, true);
            }
            MainOp::Fire(f) => self.fire(r, &f),
        }
    }

    fn work_step(&mut self, r: usize) {
        let (body, events) = self.ranks[r].ready.pop_front().expect("ready task");
        let n = match body {
            Body::Node(n) => n,
            Body::Sink => return,
            Body::Relay => {
                let ttl = events[0].ints().expect("hop payload")[0];
                let p = self.ranks.len();
                let mut forward = |target: usize, ttl: i32| {
                    let fire = Fire {
                        target,
                        identifier: HOP.to_string(),
                        persistent: false,
                        ttl: Some(ttl),
                    };
                    self.fire(r, &fire);
                };
                let target = if p == 1 { r } else { (r + 1 + ttl as usize % (p - 1)) % p };
                if ttl > 0 {
                    forward(target, ttl - 1);
                }
                if ttl % 2 == 1 {
                    forward(target, ttl - 1);
                }
                return;
            }
        };
        self.outcome.nodes_run += 1;
        let node = &self.plan.nodes[n];
        for f in &node.fires {
            self.fire(r, f);
        }
        for &c in &node.spawns {
            let deps = self.plan.nodes[c].deps.clone();
            self.submit(r, Body::Node(c), deps, false);
        }
    }

    fn handle(&mut self, r: usize, action: TokenAction) -> Result<(), String> {
        match action {
            TokenAction::Forward { to, token } => {
                let frame = Frame::Control {
                    source: r,
                    message: Control::Token(token),
                };
                self.ranks[r].transport.send(to, frame).expect("loopback send");
            }
            TokenAction::Retry => {}
            TokenAction::Terminated => {
                if !self.world_quiescent() {
                    return Err(format!("terminated at step {} while the world was busy", self.outcome.steps));
                }
                if self.hub.in_flight() != 0 {
                    return Err(format!("terminated with {} frames in flight", self.hub.in_flight()));
                }
                self.outcome.terminated = true;
                for to in 1..self.ranks.len() {
                    let frame = Frame::Control {
                        source: 0,
                        message: Control::Terminate {
                            round: self.ranks[0].detector.completed_rounds(),
                        },
                    };
                    self.ranks[0].transport.send(to, frame).expect("loopback send");
                }
            }
        }
        Ok(())
    }

    fn start_round(&mut self) -> Result<(), String> {
        if self.world_quiescent() {
            self.outcome.rounds_after_quiescence += 1;
        }
        let local = self.local_status(0);
        let action = self.ranks[0].detector.start_round(local);
        self.handle(0, action)
    }

    fn deliver_step(&mut self) -> Result<(), String> {
        let d = self.hub.deterministic_step().map_err(|e| e.to_string())?;
        for frame in self.hub.drain_inbox(d.target) {
            match frame {
                Frame::Event(e) => {
                    if self.outcome.terminated {
                        return Err(format!("event {} delivered after termination", e.identifier));
                    }
                    self.events_in_flight -= 1;
                    let rank = &mut self.ranks[d.target];
                    rank.received += 1;
                    let acts = rank.matcher.deliver_event(e);
                    self.activate(d.target, acts);
                }
                Frame::Control {
                    message: Control::Token(token),
                    ..
                } => {
                    if d.target == 0
                        && token.color == TokenColor::White
                        && token.global_deficit == 0
                        && !self.world_quiescent()
                    {
                        self.outcome.deceptive_rounds += 1;
                    }
                    let local = self.local_status(d.target);
                    let action = self.ranks[d.target].detector.on_token(token, local);
                    self.handle(d.target, action)?;
                }
                Frame::Control {
                    message: Control::Terminate { .. },
                    ..
                } => self.ranks[d.target].terminate_seen = true,
                Frame::Control {
                    message: Control::Goodbye,
                    ..
                } => {}
            }
        }
        Ok(())
    }

    fn run(mut self, rng: &mut impl Rng, max_steps: usize) -> Result<SimOutcome, String> {
        #[derive(Clone, Copy)]
        enum Action {
            Deliver,
            Main(usize),
            Work(usize),
            Round,
        }
        let p = self.ranks.len();
        // Each run gets its own bias between actions, so some schedules
        // race tokens against busy ranks and others starve them.
        let weights: [u32; 4] = std::array::from_fn(|_| 1 << rng.gen_range(0..5));
        let mut enabled = Vec::new();
        while self.outcome.steps < max_steps {
            enabled.clear();
            if self.hub.parked() > 0 {
                enabled.push(Action::Deliver);
            }
            for r in 0..p {
                if !self.finalising(r) {
                    enabled.push(Action::Main(r));
                }
                if !self.ranks[r].ready.is_empty() {
                    enabled.push(Action::Work(r));
                }
            }
            if !self.outcome.terminated && self.finalising(0) && !self.ranks[0].detector.round_in_flight() {
                enabled.push(Action::Round);
            }
            let Ok(&action) = enabled.choose_weighted(rng, |a| match a {
                Action::Deliver => weights[0],
                Action::Main(_) => weights[1],
                Action::Work(_) => weights[2],
                Action::Round => weights[3],
            }) else {
                break;
            };
            self.outcome.steps += 1;
            match action {
                Action::Deliver => self.deliver_step()?,
                Action::Main(r) => self.main_step(r),
                Action::Work(r) => self.work_step(r),
                Action::Round => self.start_round()?,
            }
        }
        self.outcome.rounds = self.ranks[0].detector.completed_rounds();
        if self.outcome.terminated {
            if self.outcome.nodes_run != self.plan.nodes.len() {
                return Err(format!(
                    "terminated after running {} of {} tasks",
                    self.outcome.nodes_run,
                    self.plan.nodes.len()
                ));
            }
            if let Some(r) = (1..p).find(|&r| !self.ranks[r].terminate_seen) {
                return Err(format!("rank {r} never saw the terminate broadcast"));
            }
        }
        Ok(self.outcome)
    }
}

/// Simulates `plan` with action choices from `seed` and a delivery schedule
/// derived from it.
pub fn simulate(plan: &Workload, seed: u64, max_steps: usize) -> Result<SimOutcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule_seed = rng.gen();
    Sim::new(plan, schedule_seed).run(&mut rng, max_steps)
}

/// Outcome of a batch of seeded simulations.
#[derive(Debug, Clone, Default)]
pub struct TerminationReport {
    pub seeds: usize,
    pub terminated: usize,
    pub max_rounds_after_quiescence: u64,
    pub deceptive_rounds: u64,
    pub failures: Vec<String>,
}

const MAX_STEPS: usize = 200_000;

/// Complete workloads must terminate safely within two rounds of becoming
/// quiescent. Workloads with an orphaned event must never terminate.
pub fn run(first_seed: u64, seeds: usize) -> TerminationReport {
    let mut report = TerminationReport::default();
    for seed in first_seed..first_seed + seeds as u64 {
        report.seeds += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orphan = seed % 5 == 4;
        let plan = generate(&mut rng, orphan);
        let max_steps = if orphan { 20_000 } else { MAX_STEPS };
        let failure = match simulate(&plan, seed, max_steps) {
            Err(msg) => Some(msg),
            Ok(out) => {
                report.deceptive_rounds += out.deceptive_rounds;
                if out.terminated {
                    report.terminated += 1;
                    report.max_rounds_after_quiescence =
                        report.max_rounds_after_quiescence.max(out.rounds_after_quiescence);
                }
                match (orphan, out.terminated) {
                    (true, true) => Some("terminated with an orphaned event".to_string()),
                    (true, false) if out.rounds < 10 => {
                        Some(format!("only {} rounds ran with an orphaned event", out.rounds))
                    }
                    (true, false) => None,
                    (false, false) => Some(format!("no verdict after {} steps", out.steps)),
                    (false, true) if out.rounds_after_quiescence > 2 => {
                        Some(format!("{} rounds after quiescence", out.rounds_after_quiescence))
                    }
                    (false, true) => None,
                }
            }
        };
        if let Some(msg) = failure {
            report.failures.push(format!("seed {seed} (P={}): {msg}", plan.world_size));
        }
    }
    report
}
