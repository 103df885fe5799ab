//! Small programs that exercise the collective patterns.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use edat::runtime::{launch, RuntimeConfig, RuntimeError};
use edat::{dep, Payload, RankSpec};

/// Ranks of `config` that run in this process.
fn hosted_ranks(config: &RuntimeConfig) -> Vec<usize> {
    match config.rank {
        Some(r) => vec![r],
        None => (0..config.world_size).collect(),
    }
}

/// Three tasks over two ranks: rank 0 fires an empty event and the value 33
/// to rank 1; rank 1 answers the first with 100 to itself and adds the two
/// values. Returns the sums seen by ranks hosted here.
pub fn simple_example(config: RuntimeConfig) -> Result<Vec<i32>, RuntimeError> {
    if config.world_size != 2 {
        return Err(RuntimeError::Config("the simple example needs exactly 2 ranks".into()));
    }
    let sums = Arc::new(Mutex::new(Vec::new()));
    launch(config, |rt| match rt.rank() {
        0 => rt
            .submit(&[], |ctx, _| {
                ctx.fire(Payload::none(), 1, "event1").expect("fire event1");
                ctx.fire(Payload::ints(&[33]), 1, "event2").expect("fire event2");
            })
            .expect("submit task1"),
        _ => {
            rt.submit(&[dep(0, "event1")], |ctx, _| {
                ctx.fire(Payload::ints(&[100]), RankSpec::SelfRank, "event3")
                    .expect("fire event3");
            })
            .expect("submit task2");
            let sums = sums.clone();
            rt.submit(&[dep(0, "event2"), dep(1, "event3")], move |_, ev| {
                let sum = ev[0].ints().expect("ints")[0] + ev[1].ints().expect("ints")[0];
                sums.lock().expect("sums").push(sum);
            })
            .expect("submit task3");
        }
    })?;
    let v = sums.lock().expect("sums").clone();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BarrierReport {
    pub world_size: usize,
    /// Barrier task runs per hosted rank.
    pub runs: Vec<usize>,
    /// Runs that started before every hosted rank had fired.
    pub early: usize,
    /// Runs that did not see one event from each rank, in rank order.
    pub malformed: usize,
}

impl BarrierReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|&n| n == 1) && self.early == 0 && self.malformed == 0
    }
}

/// Every rank fires to all ranks and waits on `(ALL, "barrier")`.
pub fn barrier_demo(config: RuntimeConfig) -> Result<BarrierReport, RuntimeError> {
    let p = config.world_size;
    let hosted = hosted_ranks(&config);
    let fired = Arc::new(AtomicUsize::new(0));
    let runs: Arc<Vec<AtomicUsize>> = Arc::new((0..p).map(|_| AtomicUsize::new(0)).collect());
    let early = Arc::new(AtomicUsize::new(0));
    let malformed = Arc::new(AtomicUsize::new(0));
    let local = hosted.len();
    launch(config, |rt| {
        let (f, runs, early, malformed) = (fired.clone(), runs.clone(), early.clone(), malformed.clone());
        rt.submit(&[dep(RankSpec::All, "barrier")], move |ctx, ev| {
            if f.load(Ordering::SeqCst) != local {
                early.fetch_add(1, Ordering::SeqCst);
            }
            if ev.len() != p || ev.iter().enumerate().any(|(r, e)| e.source_rank != r) {
                malformed.fetch_add(1, Ordering::SeqCst);
            }
            runs[ctx.rank()].fetch_add(1, Ordering::SeqCst);
        })
        .expect("submit barrier");
        fired.fetch_add(1, Ordering::SeqCst);
        rt.fire(Payload::none(), RankSpec::All, "barrier").expect("fire barrier");
    })?;
    Ok(BarrierReport {
        world_size: p,
        runs: hosted.iter().map(|&r| runs[r].load(Ordering::SeqCst)).collect(),
        early: early.load(Ordering::SeqCst),
        malformed: malformed.load(Ordering::SeqCst),
    })
}

/// Every rank fires its id to rank 0, which sums them from
/// `(ALL, "reduce")`. `None` when rank 0 is hosted elsewhere.
pub fn reduce_demo(config: RuntimeConfig) -> Result<Option<i64>, RuntimeError> {
    let total = Arc::new(Mutex::new(None));
    launch(config, |rt| {
        if rt.rank() == 0 {
            let total = total.clone();
            rt.submit(&[dep(RankSpec::All, "reduce")], move |_, ev| {
                let sum = ev.iter().map(|e| e.longs().expect("longs")[0]).sum::<i64>();
                *total.lock().expect("total") = Some(sum);
            })
            .expect("submit reduction");
        }
        rt.fire(Payload::longs(&[rt.rank() as i64]), 0, "reduce")
            .expect("fire contribution");
    })?;
    let v = *total.lock().expect("total");
    Ok(v)
}
