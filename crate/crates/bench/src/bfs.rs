//! Level-synchronous distributed BFS on the event runtime.
//!
//! Per level `n` every rank runs a persistent task named `visit_n` on
//! `(ANY, "visit_n")`. Each activation receives one batch of `(child,
//! parent)` pairs packed as longs; every rank sends exactly one batch to
//! every rank per level, so the `P`-th activation closes the level: the task
//! removes itself and fires its count of newly visited vertices to all ranks
//! as `level_done_n`. A task on `(ALL, "level_done_n")` sums the counts; a
//! zero total ends the search, otherwise the rank expands its new frontier
//! into `visit_(n+1)` batches. The first activation of `visit_n` submits
//! `visit_(n+1)` and the level-`n` reduction.
//!
//! At the end every rank fires its parent array to rank 0, which assembles
//! the global tree from `(ALL, "parents")`.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use edat::runtime::{launch, Diagnostics, Runtime, RuntimeConfig, RuntimeError, TaskContext};
use edat::{dep, Event, Payload, RankSpec};

use crate::graph::DistributedGraph;
use crate::validate::Parents;

const STATE_LOCK: &str = "bfs_state";
const UNSET: i64 = -1;

fn visit_id(level: u32) -> String {
    format!("visit_{level}")
}

fn done_id(level: u32) -> String {
    format!("level_done_{level}")
}

/// What rank 0 assembles once the search ends.
#[derive(Debug, Clone, PartialEq)]
pub struct BfsOutcome {
    pub parents: Parents,
    /// Adjacency entries examined while expanding frontiers.
    pub traversed_edges: u64,
    /// Levels that discovered at least one vertex, the root's included.
    pub levels: u32,
    pub elapsed: Duration,
}

impl BfsOutcome {
    pub fn teps(&self) -> f64 {
        self.traversed_edges as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

#[derive(Debug)]
pub struct BfsRun {
    /// `None` on processes that do not host rank 0.
    pub outcome: Option<BfsOutcome>,
    pub diagnostics: Vec<Diagnostics>,
}

#[derive(Debug, Default)]
struct LevelState {
    parent: Vec<i64>,
    /// Local vertices first reached in the level being collected.
    next: Vec<usize>,
    /// The last closed level, waiting for its reduction to expand it. Kept
    /// apart from `next` because batches of the following level can arrive
    /// before this rank's reduction runs.
    frontier: Vec<usize>,
    batches: usize,
    examined: u64,
}

struct RankBfs {
    graph: Arc<DistributedGraph>,
    /// Guard state with the runtime's lock table as well as the mutex, so
    /// concurrent activations queue in the scheduler instead of blocking a
    /// worker thread.
    guarded: bool,
    state: Mutex<LevelState>,
    result: Arc<Mutex<Option<BfsOutcome>>>,
    start: Instant,
}

impl RankBfs {
    fn state(&self, ctx: &TaskContext) -> MutexGuard<'_, LevelState> {
        if self.guarded {
            ctx.lock(STATE_LOCK).expect("lock inside a task");
        }
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn release(&self, ctx: &TaskContext, guard: MutexGuard<'_, LevelState>) {
        drop(guard);
        if self.guarded {
            ctx.unlock(STATE_LOCK).expect("lock held");
        }
    }
}

fn longs(ev: &Event) -> Vec<i64> {
    ev.longs().expect("long payload")
}

/// Submits `visit_level` and the reduction of the level before it.
fn submit_level(rt: &Runtime, bfs: &Arc<RankBfs>, level: u32) {
    let b = bfs.clone();
    rt.submit_named_persistent(&visit_id(level), &[dep(RankSpec::Any, &visit_id(level))], move |ctx, ev| {
        visit(ctx, &b, level, ev)
    })
    .expect("submit visit task");
    let b = bfs.clone();
    rt.submit(&[dep(RankSpec::All, &done_id(level - 1))], move |ctx, ev| {
        reduce(ctx, &b, level - 1, ev)
    })
    .expect("submit level reduction");
}

fn visit(ctx: &TaskContext, bfs: &Arc<RankBfs>, level: u32, ev: &[Event]) {
    let p = ctx.world_size();
    let pairs = longs(&ev[0]);
    let mut st = bfs.state(ctx);
    if st.batches == 0 {
        submit_level(ctx.runtime(), bfs, level + 1);
    }
    for pair in pairs.chunks_exact(2) {
        let (child, parent) = (pair[0] as u64, pair[1]);
        let local = bfs.graph.local_index(child);
        if st.parent[local] == UNSET {
            st.parent[local] = parent;
            st.next.push(local);
        }
    }
    st.batches += 1;
    let closed = (st.batches == p).then(|| {
        st.batches = 0;
        st.frontier = std::mem::take(&mut st.next);
        st.frontier.len()
    });
    bfs.release(ctx, st);
    if let Some(found) = closed {
        ctx.remove_persistent_task(&visit_id(level));
        ctx.fire(Payload::longs(&[found as i64]), RankSpec::All, &done_id(level))
            .expect("fire level_done");
    }
}

fn reduce(ctx: &TaskContext, bfs: &Arc<RankBfs>, level: u32, ev: &[Event]) {
    let p = ctx.world_size();
    let total: i64 = ev.iter().map(|e| longs(e)[0]).sum();
    if total == 0 {
        finish(ctx, bfs, level);
        return;
    }
    let graph = &bfs.graph;
    let part = graph.part(ctx.rank());
    let mut batches: Vec<Vec<i64>> = vec![Vec::new(); p];
    let mut st = bfs.state(ctx);
    for local in std::mem::take(&mut st.frontier) {
        let u = graph.global_id(ctx.rank(), local) as i64;
        for &w in part.neighbors(local) {
            let b = &mut batches[graph.owner(w)];
            b.push(w as i64);
            b.push(u);
        }
        st.examined += part.degree(local) as u64;
    }
    bfs.release(ctx, st);
    for (t, batch) in batches.iter().enumerate() {
        ctx.fire(Payload::longs(batch), t, &visit_id(level + 1))
            .expect("fire visit batch");
    }
}

fn finish(ctx: &TaskContext, bfs: &Arc<RankBfs>, level: u32) {
    ctx.remove_persistent_task(&visit_id(level + 1));
    let st = bfs.state(ctx);
    let mut payload = Vec::with_capacity(st.parent.len() + 2);
    payload.push(st.examined as i64);
    payload.push(level as i64);
    payload.extend_from_slice(&st.parent);
    bfs.release(ctx, st);
    ctx.fire(Payload::longs(&payload), 0, "parents").expect("fire parents");
}

fn gather(bfs: &RankBfs, ev: &[Event]) {
    let graph = &bfs.graph;
    let mut parents = vec![None; graph.vertex_count() as usize];
    let mut traversed = 0;
    let mut levels = 0;
    for (rank, e) in ev.iter().enumerate() {
        let data = longs(e);
        traversed += data[0] as u64;
        levels = data[1] as u32;
        for (local, &p) in data[2..].iter().enumerate() {
            if p != UNSET {
                parents[graph.global_id(rank, local) as usize] = Some(p as u64);
            }
        }
    }
    let outcome = BfsOutcome {
        parents,
        traversed_edges: traversed,
        levels,
        elapsed: bfs.start.elapsed(),
    };
    *bfs.result.lock().unwrap_or_else(|p| p.into_inner()) = Some(outcome);
}

fn rank_main(rt: &Runtime, graph: &Arc<DistributedGraph>, root: u64, result: &Arc<Mutex<Option<BfsOutcome>>>) {
    let rank = rt.rank();
    let mut state = LevelState {
        parent: vec![UNSET; graph.part(rank).vertex_count()],
        ..Default::default()
    };
    if graph.owner(root) == rank {
        let local = graph.local_index(root);
        state.parent[local] = root as i64;
        state.frontier.push(local);
    }
    let found = state.frontier.len();
    let bfs = Arc::new(RankBfs {
        graph: graph.clone(),
        guarded: rt.worker_count() > 1,
        state: Mutex::new(state),
        result: result.clone(),
        start: Instant::now(),
    });
    if rank == 0 {
        let b = bfs.clone();
        rt.submit(&[dep(RankSpec::All, "parents")], move |_, ev| gather(&b, ev))
            .expect("submit gather");
    }
    submit_level(rt, &bfs, 1);
    rt.fire(Payload::longs(&[found as i64]), RankSpec::All, &done_id(0))
        .expect("fire level_done_0");
}

/// Runs the search from `root` on every rank of `config` hosted here.
pub fn bfs_run(graph: Arc<DistributedGraph>, root: u64, config: RuntimeConfig) -> Result<BfsRun, RuntimeError> {
    if graph.world_size != config.world_size {
        return Err(RuntimeError::Config(format!(
            "graph partitioned for {} ranks, world has {}",
            graph.world_size, config.world_size
        )));
    }
    if root >= graph.vertex_count() {
        return Err(RuntimeError::Config(format!("root {root} is not a vertex")));
    }
    let result = Arc::new(Mutex::new(None));
    let diagnostics = launch(config, |rt| rank_main(rt, &graph, root, &result))?;
    let outcome = result.lock().unwrap_or_else(|p| p.into_inner()).take();
    Ok(BfsRun { outcome, diagnostics })
}
