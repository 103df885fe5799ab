use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use edat::runtime::{launch, Runtime, RuntimeConfig, RuntimeError};
use edat::scheduler::ProgressMode;
use edat::transport::RankRoster;
use edat::{dep, Event, Payload, RankSpec};

fn cfg(p: usize) -> RuntimeConfig {
    RuntimeConfig::loopback(p)
        .workers(1)
        .finalise_timeout(Duration::from_secs(30))
}

fn simple_example(rt: &Runtime, out: &Arc<Mutex<Vec<i32>>>) {
    match rt.rank() {
        0 => rt
            .submit(&[], |ctx, _| {
                ctx.fire(Payload::none(), 1, "event1").unwrap();
                ctx.fire(Payload::ints(&[33]), 1, "event2").unwrap();
            })
            .unwrap(),
        1 => {
            rt.submit(&[dep(0, "event1")], |ctx, _| {
                ctx.fire(Payload::ints(&[100]), RankSpec::SelfRank, "event3").unwrap();
            })
            .unwrap();
            let out = out.clone();
            rt.submit(&[dep(0, "event2"), dep(1, "event3")], move |_, ev: &[Event]| {
                let sum = ev[0].ints().unwrap()[0] + ev[1].ints().unwrap()[0];
                out.lock().unwrap().push(sum);
            })
            .unwrap();
        }
        _ => {}
    }
}

fn run_simple(config: RuntimeConfig) -> Vec<i32> {
    let out = Arc::new(Mutex::new(Vec::new()));
    launch(config, |rt| simple_example(rt, &out)).unwrap();
    let v = out.lock().unwrap().clone();
    v
}

#[test]
fn simple_example_sums_to_133() {
    assert_eq!(run_simple(cfg(2)), vec![133]);
    for seed in 0..20 {
        assert_eq!(run_simple(cfg(2).deterministic(seed)), vec![133], "seed {seed}");
    }
}

#[test]
fn simple_example_with_idle_worker_progress() {
    assert_eq!(run_simple(cfg(2).progress(ProgressMode::IdleWorker)), vec![133]);
    assert_eq!(
        run_simple(cfg(2).progress(ProgressMode::IdleWorker).workers(2).deterministic(3)),
        vec![133]
    );
}

#[test]
fn simple_example_over_tcp() {
    let roster = RankRoster::free_localhost(2).unwrap();
    let config = RuntimeConfig::tcp(roster)
        .workers(1)
        .finalise_timeout(Duration::from_secs(30));
    assert_eq!(run_simple(config), vec![133]);
}

#[test]
fn reduction_over_ranks() {
    for p in [1, 2, 4] {
        let total = Arc::new(AtomicU64::new(u64::MAX));
        launch(cfg(p), |rt| {
            if rt.rank() == 0 {
                let total = total.clone();
                rt.submit(&[dep(RankSpec::All, "event")], move |_, ev| {
                    let sum: i32 = ev.iter().map(|e| e.ints().unwrap()[0]).sum();
                    total.store(sum as u64, Ordering::SeqCst);
                })
                .unwrap();
            }
            rt.fire(Payload::ints(&[rt.rank() as i32]), 0, "event").unwrap();
        })
        .unwrap();
        assert_eq!(total.load(Ordering::SeqCst), (p * (p - 1) / 2) as u64);
    }
}

#[test]
fn barrier_runs_once_per_rank_after_every_fire() {
    for seed in 0..5 {
        let p = 3;
        let fired = Arc::new(AtomicUsize::new(0));
        let runs = Arc::new(AtomicUsize::new(0));
        let early = Arc::new(AtomicBool::new(false));
        launch(cfg(p).deterministic(seed), |rt| {
            let (fired2, runs2, early2) = (fired.clone(), runs.clone(), early.clone());
            rt.submit(&[dep(RankSpec::All, "event")], move |_, ev| {
                assert_eq!(ev.len(), p);
                if fired2.load(Ordering::SeqCst) != p {
                    early2.store(true, Ordering::SeqCst);
                }
                runs2.fetch_add(1, Ordering::SeqCst);
            })
            .unwrap();
            fired.fetch_add(1, Ordering::SeqCst);
            rt.fire(Payload::none(), RankSpec::All, "event").unwrap();
        })
        .unwrap();
        assert_eq!(runs.load(Ordering::SeqCst), p);
        assert!(!early.load(Ordering::SeqCst));
    }
}

#[test]
fn nested_submission() {
    let ran = Arc::new(AtomicBool::new(false));
    let r = ran.clone();
    launch(cfg(1), move |rt| {
        let r = r.clone();
        rt.submit(&[], move |ctx, _| {
            let r = r.clone();
            ctx.submit(&[dep(RankSpec::SelfRank, "inner")], move |_, ev| {
                assert_eq!(ev[0].longs().unwrap(), vec![7]);
                r.store(true, Ordering::SeqCst);
            })
            .unwrap();
            ctx.fire(Payload::longs(&[7]), RankSpec::SelfRank, "inner").unwrap();
        })
        .unwrap();
    })
    .unwrap();
    assert!(ran.load(Ordering::SeqCst));
}

#[test]
fn payload_is_snapshotted_at_fire() {
    let got = Arc::new(Mutex::new(Vec::new()));
    let g = got.clone();
    launch(cfg(1), move |rt| {
        let g = g.clone();
        rt.submit(&[dep(RankSpec::SelfRank, "event3")], move |_, ev| {
            *g.lock().unwrap() = ev[0].ints().unwrap();
        })
        .unwrap();
        let mut buf = vec![1, 2, 3];
        rt.fire(Payload::ints(&buf), RankSpec::SelfRank, "event3").unwrap();
        buf[0] = 99;
        assert_eq!(buf[0], 99);
    })
    .unwrap();
    assert_eq!(*got.lock().unwrap(), vec![1, 2, 3]);
}

#[test]
fn unconsumed_event_blocks_finalise() {
    let config = RuntimeConfig::loopback(2)
        .workers(1)
        .finalise_timeout(Duration::from_millis(300));
    let err = launch(config, |rt| {
        if rt.rank() == 0 {
            rt.fire(Payload::none(), 1, "orphan").unwrap();
        }
    })
    .unwrap_err();
    let RuntimeError::FinaliseTimeout(d) = err else {
        panic!("expected a timeout, got {err:?}");
    };
    assert!(!d.terminated);
}

#[test]
fn unconsumed_event_reported_in_diagnostics() {
    let rt = Runtime::init(&RuntimeConfig::loopback(1).workers(1)).unwrap();
    rt.fire(Payload::none(), 0, "orphan").unwrap();
    let Err(RuntimeError::FinaliseTimeout(d)) = rt.finalise_timeout(Duration::from_millis(100)) else {
        panic!("finalise should not succeed");
    };
    assert_eq!(d.matcher.unconsumed_nonpersistent_events, 1);
    assert_eq!(d.blocking_conditions(), vec!["unconsumed non-persistent events"]);
}

#[test]
fn persistent_leftovers_do_not_block_finalise() {
    let diags = launch(cfg(2), |rt| {
        rt.submit_persistent(&[dep(RankSpec::Any, "never")], |_, _| {}).unwrap();
        rt.fire_persistent(Payload::ints(&[1]), RankSpec::All, "sticky").unwrap();
    })
    .unwrap();
    for d in diags {
        assert!(d.terminated);
        assert_eq!(d.buffered_persistent_events, 2);
        assert_eq!(d.persistent_tasks, 1);
    }
}

#[test]
fn persistent_task_rearms_and_can_be_removed() {
    let count = Arc::new(AtomicUsize::new(0));
    let c = count.clone();
    launch(cfg(2), move |rt| {
        if rt.rank() == 1 {
            let c = c.clone();
            rt.submit_named_persistent("sink", &[dep(0, "tick")], move |ctx, ev| {
                let n = c.fetch_add(1, Ordering::SeqCst) + 1;
                assert_eq!(ev[0].longs().unwrap()[0] as usize, n);
                if n == 5 {
                    assert!(ctx.remove_persistent_task("sink"));
                }
            })
            .unwrap();
            assert!(rt
                .submit_named_persistent("sink", &[dep(0, "x")], |_, _| {})
                .is_err());
        } else {
            for i in 1..=5i64 {
                rt.fire(Payload::longs(&[i]), 1, "tick").unwrap();
            }
        }
    })
    .unwrap();
    assert_eq!(count.load(Ordering::SeqCst), 5);
}

#[test]
fn wait_pauses_and_frees_the_worker() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let l = log.clone();
    let diags = launch(cfg(1), move |rt| {
        let l1 = l.clone();
        rt.submit(&[], move |ctx, _| {
            l1.lock().unwrap().push("waiting");
            let ev = ctx.wait(&[dep(0, "x"), dep(RankSpec::Any, "y")]).unwrap();
            assert_eq!(ev[0].identifier.as_ref(), "x");
            assert_eq!(ev[1].ints().unwrap(), vec![2]);
            l1.lock().unwrap().push("resumed");
        })
        .unwrap();
        let l2 = l.clone();
        rt.submit(&[], move |ctx, _| {
            l2.lock().unwrap().push("other task");
            ctx.fire(Payload::ints(&[2]), 0, "y").unwrap();
            ctx.fire(Payload::ints(&[1]), 0, "x").unwrap();
        })
        .unwrap();
    })
    .unwrap();
    assert_eq!(*log.lock().unwrap(), vec!["waiting", "other task", "resumed"]);
    assert_eq!(diags[0].pauses, 1);
}

#[test]
fn wait_fast_path_does_not_pause() {
    let diags = launch(cfg(1), |rt| {
        rt.fire(Payload::none(), 0, "x").unwrap();
        rt.submit(&[], |ctx, _| {
            let ev = ctx.wait(&[dep(0, "x")]).unwrap();
            assert_eq!(ev.len(), 1);
        })
        .unwrap();
    })
    .unwrap();
    assert_eq!(diags[0].pauses, 0);
}

#[test]
fn retrieve_any_takes_subset() {
    launch(cfg(1), |rt| {
        rt.fire(Payload::ints(&[5]), 0, "b").unwrap();
        rt.submit(&[], |ctx, _| {
            let (slots, n) = ctx.retrieve_any(&[dep(0, "a"), dep(0, "b")]).unwrap();
            assert_eq!(n, 1);
            assert!(slots[0].is_none());
            assert_eq!(slots[1].as_ref().unwrap().ints().unwrap(), vec![5]);
            let (_, n) = ctx.retrieve_any(&[dep(0, "a"), dep(0, "b")]).unwrap();
            assert_eq!(n, 0);
        })
        .unwrap();
    })
    .unwrap();
}

#[test]
fn locks_released_during_wait_and_reacquired() {
    let probes = Arc::new(Mutex::new(Vec::new()));
    let p = probes.clone();
    launch(cfg(1).workers(2), move |rt| {
        let p1 = p.clone();
        rt.submit(&[], move |ctx, _| {
            ctx.lock("L").unwrap();
            ctx.fire(Payload::none(), 0, "holding").unwrap();
            ctx.wait(&[dep(0, "go")]).unwrap();
            p1.lock().unwrap().push(format!("resumed holding {:?}", ctx.held_locks()));
        })
        .unwrap();
        let p2 = p.clone();
        rt.submit(&[dep(0, "holding")], move |ctx, _| {
            // Blocks until the first task pauses and gives up L.
            ctx.lock("L").unwrap();
            p2.lock().unwrap().push("second task got L".to_string());
            ctx.fire(Payload::none(), 0, "go").unwrap();
            ctx.unlock("L").unwrap();
        })
        .unwrap();
    })
    .unwrap();
    assert_eq!(
        *probes.lock().unwrap(),
        vec!["second task got L".to_string(), "resumed holding [\"L\"]".to_string()]
    );
}

#[test]
fn event_guarded_shared_state() {
    const N: usize = 2_000;
    let overlap = Arc::new(AtomicBool::new(false));
    let counter = Arc::new(AtomicU64::new(0));
    let (o, c) = (overlap.clone(), counter.clone());
    launch(cfg(2).workers(3), move |rt| {
        if rt.rank() == 0 {
            let (o, c) = (o.clone(), c.clone());
            let inside = Arc::new(AtomicBool::new(false));
            rt.submit_persistent(&[dep(RankSpec::SelfRank, "data"), dep(1, "values")], move |ctx, ev| {
                if inside.swap(true, Ordering::SeqCst) {
                    o.store(true, Ordering::SeqCst);
                }
                let shared = ev[0].payload.as_address::<AtomicU64>().unwrap();
                let v = shared.load(Ordering::SeqCst) + ev[1].ints().unwrap()[0] as u64;
                thread::yield_now();
                shared.store(v, Ordering::SeqCst);
                inside.store(false, Ordering::SeqCst);
                if v < N as u64 {
                    ctx.fire(ev[0].payload.clone(), RankSpec::SelfRank, "data").unwrap();
                }
            })
            .unwrap();
            rt.fire(Payload::address(c.clone()), RankSpec::SelfRank, "data").unwrap();
        } else {
            for _ in 0..N {
                rt.fire(Payload::ints(&[1]), 0, "values").unwrap();
            }
        }
    })
    .unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), N as u64);
    assert!(!overlap.load(Ordering::SeqCst));
}

#[test]
fn task_panic_releases_locks_and_world_still_terminates() {
    let diags = launch(cfg(1), |rt| {
        rt.submit(&[], |ctx, _| {
            ctx.lock("L").unwrap();
            panic!("task failure");
        })
        .unwrap();
        rt.submit(&[dep(RankSpec::SelfRank, "after")], |ctx, _| {
            assert!(ctx.test_lock("L"));
        })
        .unwrap();
        rt.fire(Payload::none(), RankSpec::SelfRank, "after").unwrap();
    })
    .unwrap();
    assert_eq!(diags[0].task_panics, 1);
}

#[test]
fn fire_and_submit_do_not_wait_for_stalled_peers() {
    let elapsed = Arc::new(Mutex::new(Duration::ZERO));
    let e = elapsed.clone();
    launch(cfg(2), move |rt| {
        if rt.rank() == 1 {
            thread::sleep(Duration::from_millis(400));
            rt.submit(&[dep(0, "n")], |_, _| {}).unwrap();
            for _ in 0..999 {
                rt.submit(&[dep(0, "n")], |_, _| {}).unwrap();
            }
        } else {
            let t = Instant::now();
            for _ in 0..1000 {
                rt.fire(Payload::none(), 1, "n").unwrap();
            }
            rt.submit(&[dep(1, "late")], |_, _| {}).unwrap();
            *e.lock().unwrap() = t.elapsed();
        }
        if rt.rank() == 1 {
            rt.fire(Payload::none(), 0, "late").unwrap();
        }
    })
    .unwrap();
    assert!(*elapsed.lock().unwrap() < Duration::from_millis(300));
}

#[test]
fn sequence_numbers_arrive_in_order() {
    let diags = launch(cfg(4).deterministic(11), |rt| {
        let p = rt.world_size();
        for _ in 0..50 {
            rt.submit(&[dep(RankSpec::All, "s")], |_, ev| {
                for (r, e) in ev.iter().enumerate() {
                    assert_eq!(e.source_rank, r);
                }
            })
            .unwrap();
        }
        for _ in 0..50 {
            rt.fire(Payload::none(), RankSpec::All, "s").unwrap();
        }
        assert_eq!(p, 4);
    })
    .unwrap();
    for d in diags {
        assert_eq!(d.sequence_violations, 0);
        assert_eq!(d.events_received, 150);
    }
}
