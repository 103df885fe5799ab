//! Random matcher scenarios compared step by step against the reference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edat::matcher::{Activation, EventKey, Matcher, TaskDescriptor, WaitId, WaitOutcome};
use edat::{DependencyDescriptor, Event, MatchSource, Payload, RankSpec, ResolvedDependency};

use crate::reference::{RefActivation, ReferenceMatcher};

const IDENTIFIERS: [&str; 3] = ["a", "b", "c"];

#[derive(Debug, Clone)]
pub enum Op {
    Submit {
        deps: Vec<DependencyDescriptor>,
        persistent: bool,
    },
    Wait {
        deps: Vec<DependencyDescriptor>,
    },
    Fire {
        source: usize,
        identifier: &'static str,
        persistent: bool,
    },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub world_size: usize,
    pub local_rank: usize,
    pub ops: Vec<Op>,
}

/// Up to three consumers with up to three dependencies each and up to six
/// events, interleaved at random.
pub fn generate(rng: &mut impl Rng) -> Scenario {
    let world_size = rng.gen_range(1..=3);
    let local_rank = rng.gen_range(0..world_size);
    let mut ops = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let n = rng.gen_range(0..=3);
        let deps = (0..n)
            .map(|_| {
                let source = match rng.gen_range(0..8) {
                    0..=2 => RankSpec::Concrete(rng.gen_range(0..world_size)),
                    3 => RankSpec::SelfRank,
                    4 => RankSpec::All,
                    _ => RankSpec::Any,
                };
                DependencyDescriptor::new(source, *IDENTIFIERS.choose(rng).expect("ids"))
            })
            .collect();
        ops.push(match rng.gen_range(0..10) {
            0..=4 => Op::Submit {
                deps,
                persistent: false,
            },
            5..=7 => Op::Submit {
                deps,
                persistent: true,
            },
            _ => Op::Wait { deps },
        });
    }
    for _ in 0..rng.gen_range(0..=6) {
        ops.push(Op::Fire {
            source: rng.gen_range(0..world_size),
            identifier: IDENTIFIERS.choose(rng).expect("ids"),
            persistent: rng.gen_bool(0.25),
        });
    }
    ops.shuffle(rng);
    Scenario {
        world_size,
        local_rank,
        ops,
    }
}

/// Written out here rather than borrowed from the runtime so the oracle
/// shares no resolution code with the implementation.
fn expand(deps: &[DependencyDescriptor], local: usize, world: usize) -> Vec<ResolvedDependency> {
    let mut out = Vec::new();
    for d in deps {
        let id = d.identifier.clone();
        match d.source {
            RankSpec::Any => out.push(ResolvedDependency::new(MatchSource::Any, id)),
            RankSpec::SelfRank => out.push(ResolvedDependency::new(MatchSource::Rank(local), id)),
            RankSpec::Concrete(r) => out.push(ResolvedDependency::new(MatchSource::Rank(r), id)),
            RankSpec::All => {
                for r in 0..world {
                    out.push(ResolvedDependency::new(MatchSource::Rank(r), id.clone()));
                }
            }
        }
    }
    out
}

fn convert(acts: Vec<Activation<u64>>) -> Vec<RefActivation> {
    acts.into_iter()
        .map(|a| match a {
            Activation::Task(t) => RefActivation::Task {
                order: t.descriptor.submission_index,
                instance: t.instance,
                events: t.events.iter().map(EventKey::from).collect(),
            },
            Activation::Resume { wait, events } => RefActivation::Resume {
                wait: wait.0,
                events: events.iter().map(EventKey::from).collect(),
            },
        })
        .collect()
}

/// Runs `scenario` against both matchers. Returns a description of the
/// first divergence.
pub fn check(scenario: &Scenario) -> Result<usize, String> {
    let mut real: Matcher<u64> = Matcher::new();
    let mut reference = ReferenceMatcher::new();
    let mut seq = vec![0u64; scenario.world_size];
    let mut matches = 0;
    for (step, op) in scenario.ops.iter().enumerate() {
        let (got, want) = match op {
            Op::Submit { deps, persistent } => {
                let resolved = expand(deps, scenario.local_rank, scenario.world_size);
                let mut d = TaskDescriptor::new(step as u64, resolved.clone());
                d.persistent = *persistent;
                let got = real.register_task(d).map(convert).map_err(|e| format!("{e:?}"));
                let want = reference.submit(resolved, *persistent).map_err(|e| format!("{e:?}"));
                match (got, want) {
                    (Ok(g), Ok(w)) => (g, w),
                    (Err(_), Err(_)) => continue,
                    (g, w) => return Err(format!("step {step}: register {g:?} vs reference {w:?}")),
                }
            }
            Op::Wait { deps } => {
                let resolved = expand(deps, scenario.local_rank, scenario.world_size);
                let got = match real.register_wait(resolved.clone(), WaitId(step as u64)) {
                    WaitOutcome::Satisfied(ev) => vec![RefActivation::Resume {
                        wait: step as u64,
                        events: ev.iter().map(EventKey::from).collect(),
                    }],
                    WaitOutcome::Pending => vec![],
                };
                let want = match reference.wait(resolved, step as u64) {
                    Some(events) => vec![RefActivation::Resume {
                        wait: step as u64,
                        events,
                    }],
                    None => vec![],
                };
                (got, want)
            }
            Op::Fire {
                source,
                identifier,
                persistent,
            } => {
                let e = Event::new(*source, *identifier, Payload::none(), *persistent, seq[*source])
                    .expect("valid event");
                seq[*source] += 1;
                (convert(real.deliver_event(e.clone())), reference.deliver(e))
            }
        };
        if got != want {
            return Err(format!("step {step} ({op:?}): activations {got:?} vs reference {want:?}"));
        }
        matches += got.len();
        let (gs, ws) = (real.state(), reference.state());
        if gs != ws {
            return Err(format!("step {step} ({op:?}): state {gs:?} vs reference {ws:?}"));
        }
    }
    Ok(matches)
}

/// Outcome of a batch of generated scenarios.
#[derive(Debug, Clone, Default)]
pub struct MatcherReport {
    pub cases: usize,
    pub activations: usize,
    pub failures: Vec<String>,
}

pub fn run(seed: u64, cases: usize) -> MatcherReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = MatcherReport::default();
    for case in 0..cases {
        let scenario = generate(&mut rng);
        report.cases += 1;
        match check(&scenario) {
            Ok(n) => report.activations += n,
            Err(msg) => {
                if report.failures.len() < 5 {
                    report.failures.push(format!("case {case}: {msg}\n  scenario: {scenario:?}"));
                } else {
                    report.failures.push(format!("case {case}"));
                }
            }
        }
    }
    report
}
