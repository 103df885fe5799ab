//! Delivery-order checks on a running world.
//!
//! Every rank fires numbered events at every rank, itself included, and
//! records what it sees:
//!
//! * a persistent task on `(ANY, "m")` logs `(instance, source, k)`; instance
//!   numbers follow arrival, so per source the `k`s must read `0, 1, 2, …`;
//! * a task on three `(s, "slot")` dependencies must see `k = 0, 1, 2` in
//!   slot order, for every source `s`;
//! * a task on two `(ALL, "all")` dependencies must see rank `j % P`, round
//!   `j / P` in slot `j`.

use std::sync::{Arc, Mutex};

use edat::runtime::{launch, Runtime, RuntimeConfig};
use edat::transport::RankRoster;
use edat::{dep, Event, Payload, RankSpec};

const SLOTS: usize = 3;
const ALL_ROUNDS: usize = 2;

#[derive(Debug, Default)]
struct Log {
    /// Per rank: `(instance, source, k)` for each `"m"` seen.
    fifo: Vec<Vec<(u64, usize, i32)>>,
    violations: Vec<String>,
    checked: usize,
}

fn k_of(e: &Event) -> i32 {
    e.ints().and_then(|v| v.first().copied()).unwrap_or(-1)
}

fn workload(rt: &Runtime, log: &Arc<Mutex<Log>>, per_pair: usize, subscribe_first: bool) {
    let p = rt.world_size();
    let me = rt.rank();
    let subscribe = || {
        let l = log.clone();
        rt.submit_persistent(&[dep(RankSpec::Any, "m")], move |ctx, ev| {
            let mut l = l.lock().expect("log");
            l.fifo[ctx.rank()].push((ctx.instance(), ev[0].source_rank, k_of(&ev[0])));
        })
        .expect("submit fifo");
        for s in 0..p {
            let l = log.clone();
            let deps = vec![dep(RankSpec::Concrete(s), "slot"); SLOTS];
            rt.submit(&deps, move |_, ev| {
                let mut l = l.lock().expect("log");
                for (i, e) in ev.iter().enumerate() {
                    l.checked += 1;
                    if e.source_rank != s || k_of(e) != i as i32 {
                        l.violations.push(format!(
                            "rank {me}: slot {i} from {s} got k={} from {}",
                            k_of(e),
                            e.source_rank
                        ));
                    }
                }
            })
            .expect("submit slot");
        }
        let l = log.clone();
        let deps = vec![dep(RankSpec::All, "all"); ALL_ROUNDS];
        rt.submit(&deps, move |_, ev| {
            let mut l = l.lock().expect("log");
            for (j, e) in ev.iter().enumerate() {
                l.checked += 1;
                if e.source_rank != j % p || k_of(e) != (j / p) as i32 {
                    l.violations.push(format!(
                        "rank {me}: all-slot {j} got k={} from {}",
                        k_of(e),
                        e.source_rank
                    ));
                }
            }
        })
        .expect("submit all");
    };
    if subscribe_first {
        subscribe();
    }
    for k in 0..per_pair.max(SLOTS).max(ALL_ROUNDS) {
        for t in 0..p {
            let payload = Payload::ints(&[k as i32]);
            if k < per_pair {
                rt.fire(payload.clone(), t, "m").expect("fire m");
            }
            if k < SLOTS {
                rt.fire(payload.clone(), t, "slot").expect("fire slot");
            }
        }
        if k < ALL_ROUNDS {
            rt.fire(Payload::ints(&[k as i32]), RankSpec::All, "all").expect("fire all");
        }
    }
    if !subscribe_first {
        subscribe();
    }
}

/// One world run. Returns the number of individual order checks made.
pub fn check(config: RuntimeConfig, per_pair: usize, subscribe_first: bool) -> Result<usize, String> {
    let p = config.world_size;
    let log = Arc::new(Mutex::new(Log {
        fifo: vec![Vec::new(); p],
        ..Default::default()
    }));
    let diags = launch(config, |rt| workload(rt, &log, per_pair, subscribe_first)).map_err(|e| e.to_string())?;
    let mut log = log.lock().expect("log");
    let mut violations = std::mem::take(&mut log.violations);
    for d in &diags {
        if d.sequence_violations > 0 {
            violations.push(format!("rank {}: {} sequence violations", d.rank, d.sequence_violations));
        }
    }
    let mut checked = log.checked;
    for (r, seen) in log.fifo.iter_mut().enumerate() {
        seen.sort_by_key(|(instance, _, _)| *instance);
        for s in 0..p {
            let ks: Vec<i32> = seen.iter().filter(|(_, src, _)| *src == s).map(|(_, _, k)| *k).collect();
            checked += ks.len();
            if ks != (0..per_pair as i32).collect::<Vec<_>>() {
                violations.push(format!("rank {r}: from {s} saw {ks:?}"));
            }
        }
    }
    if violations.is_empty() {
        Ok(checked)
    } else {
        Err(violations.join("; "))
    }
}

#[derive(Debug, Clone, Default)]
pub struct OrderingReport {
    pub runs: usize,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl OrderingReport {
    fn record(&mut self, label: String, outcome: Result<usize, String>) {
        self.runs += 1;
        match outcome {
            Ok(n) => self.checks += n,
            Err(msg) => self.failures.push(format!("{label}: {msg}")),
        }
    }
}

/// Seeded loopback interleavings over 2 to 4 ranks.
pub fn run_loopback(first_seed: u64, runs: usize, per_pair: usize) -> OrderingReport {
    let mut report = OrderingReport::default();
    for seed in first_seed..first_seed + runs as u64 {
        let p = 2 + (seed % 3) as usize;
        let config = RuntimeConfig::loopback(p).workers(2).deterministic(seed);
        report.record(format!("seed {seed} (P={p})"), check(config, per_pair, seed % 2 == 0));
    }
    report
}

/// One run over real sockets on localhost.
pub fn run_tcp(world_size: usize, per_pair: usize) -> OrderingReport {
    let mut report = OrderingReport::default();
    let outcome = RankRoster::free_localhost(world_size)
        .map_err(|e| e.to_string())
        .and_then(|roster| check(RuntimeConfig::tcp(roster).workers(2), per_pair, true));
    report.record(format!("tcp P={world_size}"), outcome);
    report
}
