//! Sequential oracle and BFS tree validation.

use std::collections::VecDeque;

use thiserror::Error;

use crate::graph::DistributedGraph;

/// Parent of each vertex, `None` where unreached.
pub type Parents = Vec<Option<u64>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleBfs {
    pub parents: Parents,
    pub levels: Vec<Option<u32>>,
    /// Adjacency entries examined: the degree sum of the reached vertices.
    pub examined_edges: u64,
}

pub fn sequential_bfs(graph: &DistributedGraph, root: u64) -> OracleBfs {
    let n = graph.vertex_count() as usize;
    let mut parents = vec![None; n];
    let mut levels = vec![None; n];
    let mut examined = 0u64;
    let mut queue = VecDeque::from([root]);
    parents[root as usize] = Some(root);
    levels[root as usize] = Some(0);
    while let Some(u) = queue.pop_front() {
        let next = levels[u as usize].expect("queued vertices have a level") + 1;
        for &w in graph.neighbors(u) {
            examined += 1;
            if parents[w as usize].is_none() {
                parents[w as usize] = Some(u);
                levels[w as usize] = Some(next);
                queue.push_back(w);
            }
        }
    }
    OracleBfs {
        parents,
        levels,
        examined_edges: examined,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidTree {
    #[error("expected {expected} parent entries, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("root {0} is not its own parent")]
    RootParent(u64),
    #[error("parent edge {child} -> {parent} is not in the graph")]
    MissingEdge { child: u64, parent: u64 },
    #[error("parent chain from {0} never reaches the root")]
    Cycle(u64),
    #[error("tree edge {child} -> {parent} spans levels {child_level} and {parent_level}")]
    TreeLevels {
        child: u64,
        parent: u64,
        child_level: u32,
        parent_level: u32,
    },
    #[error("graph edge {u} - {v} spans levels {lu} and {lv}")]
    EdgeLevels { u: u64, v: u64, lu: u32, lv: u32 },
    #[error("vertex {0} is reachable but has no parent")]
    Unreached(u64),
    #[error("vertex {0} is unreachable but has a parent")]
    Spurious(u64),
}

/// Levels implied by following parent pointers to the root.
fn derive_levels(parents: &Parents, root: u64) -> Result<Vec<Option<u32>>, InvalidTree> {
    let mut levels: Vec<Option<u32>> = vec![None; parents.len()];
    levels[root as usize] = Some(0);
    let mut chain = Vec::new();
    for start in 0..parents.len() as u64 {
        if parents[start as usize].is_none() || levels[start as usize].is_some() {
            continue;
        }
        chain.clear();
        let mut v = start;
        let base = loop {
            if let Some(l) = levels[v as usize] {
                break l;
            }
            if chain.len() > parents.len() {
                return Err(InvalidTree::Cycle(start));
            }
            chain.push(v);
            match parents[v as usize] {
                Some(p) if (p as usize) < parents.len() => v = p,
                _ => return Err(InvalidTree::Cycle(start)),
            }
        };
        for (depth, &u) in chain.iter().rev().enumerate() {
            levels[u as usize] = Some(base + depth as u32 + 1);
        }
    }
    Ok(levels)
}

/// Tree checks: root is its own parent, parent edges exist, levels step by one
/// along tree edges and by at most one along any graph edge, and the reached
/// set equals the oracle's.
pub fn check_bfs(graph: &DistributedGraph, parents: &Parents, root: u64) -> Result<(), InvalidTree> {
    let n = graph.vertex_count() as usize;
    if parents.len() != n {
        return Err(InvalidTree::WrongLength {
            expected: n,
            got: parents.len(),
        });
    }
    if parents[root as usize] != Some(root) {
        return Err(InvalidTree::RootParent(root));
    }
    for (v, p) in parents.iter().enumerate() {
        let (v, Some(p)) = (v as u64, *p) else { continue };
        if v != root && !graph.has_edge(v, p) {
            return Err(InvalidTree::MissingEdge { child: v, parent: p });
        }
    }
    let levels = derive_levels(parents, root)?;
    for (v, p) in parents.iter().enumerate() {
        let (v, Some(p)) = (v as u64, *p) else { continue };
        if v == root {
            continue;
        }
        let (lc, lp) = (levels[v as usize].expect("derived"), levels[p as usize].expect("derived"));
        if lc != lp + 1 {
            return Err(InvalidTree::TreeLevels {
                child: v,
                parent: p,
                child_level: lc,
                parent_level: lp,
            });
        }
    }
    for u in 0..n as u64 {
        let Some(lu) = levels[u as usize] else { continue };
        for &v in graph.neighbors(u) {
            if let Some(lv) = levels[v as usize] {
                if lu.abs_diff(lv) > 1 {
                    return Err(InvalidTree::EdgeLevels { u, v, lu, lv });
                }
            }
        }
    }
    let oracle = sequential_bfs(graph, root);
    for v in 0..n {
        match (oracle.parents[v].is_some(), parents[v].is_some()) {
            (true, false) => return Err(InvalidTree::Unreached(v as u64)),
            (false, true) => return Err(InvalidTree::Spurious(v as u64)),
            _ => {}
        }
    }
    Ok(())
}

pub fn validate_bfs(graph: &DistributedGraph, parents: &Parents, root: u64) -> bool {
    check_bfs(graph, parents, root).is_ok()
}

/// Vertices with a parent.
pub fn reached_set(parents: &Parents) -> Vec<u64> {
    (0..parents.len() as u64).filter(|&v| parents[v as usize].is_some()).collect()
}
